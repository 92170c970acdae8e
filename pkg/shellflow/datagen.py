"""
Dataset Generation
==================
Sheet and ball meshes, scripted grasp trajectories and simulated sequences
with the 12-of-17 Train/Test split.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import MeshKind, SequenceSpec, SimConfig, TrajectoryKind
from .errors import ShapeMismatchError
from .mesh import TriMesh
from .metrics import TEST, TRAIN, split_labels
from .shell_sim import SimState, build_model, rollout

logger = logging.getLogger("shellflow.datagen")


# ============== Dataset ==============

@dataclass(eq=False)
class Dataset:
    """One simulated sequence: frames (N, K, 3), grasp targets (N, g, 3)."""
    mesh: TriMesh
    frames: np.ndarray
    grasp: np.ndarray
    trajectory: np.ndarray
    sim: SimConfig
    split: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        N = self.frames.shape[0]
        if self.frames.shape[1:] != (self.mesh.K, 3):
            raise ShapeMismatchError(f"frames have shape {self.frames.shape}, mesh has K={self.mesh.K}")
        if self.trajectory.shape != (N, self.grasp.size, 3):
            raise ShapeMismatchError(f"trajectory has shape {self.trajectory.shape}, expected ({N}, {self.grasp.size}, 3)")
        if self.split.shape != (N,):
            raise ShapeMismatchError("one split label per frame is required")

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def name(self) -> str:
        return self.provenance.get("name", "dataset")

    def indices(self, label: str) -> np.ndarray:
        return np.flatnonzero(self.split == label)

    def triples(self, label: str) -> np.ndarray:
        """Frames m >= 2 whose triple (m-2, m-1, m) lies entirely in `label`."""
        inside = self.split == label
        return np.array([m for m in range(2, self.n_frames) if inside[m - 2:m + 1].all()], dtype=np.int64)


# ============== Meshes ==============

def make_sheet(n: int, holes: bool = False, size: float = 1.0) -> tuple[TriMesh, np.ndarray]:
    """
    n x n grid in the XY plane (z = 0), diagonals (i, j) -> (i+1, j+1),
    counter-clockwise triangles. The two corners of the top row are grasped.
    With `holes`, a centered block of s x s vertices (s = (n-1)//4) and every
    triangle touching it are removed. The rim is not re-triangulated: the hole
    boundary runs along grid lines except at two opposite corners, where one
    surviving triangle leaves a diagonal boundary edge.
    """
    if n < 3:
        raise ShapeMismatchError("sheet resolution must be at least 3")
    h = size / (n - 1)
    jj, ii = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    vertices = np.stack([ii.ravel() * h, jj.ravel() * h, np.zeros(n * n)], axis=1)

    def vid(i, j):
        return j * n + i

    triangles = []
    for j in range(n - 1):
        for i in range(n - 1):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            triangles.append((a, b, c))
            triangles.append((a, c, d))
    triangles = np.array(triangles, dtype=np.int64)
    grasp = np.array([vid(0, n - 1), vid(n - 1, n - 1)], dtype=np.int64)

    if holes:
        s = (n - 1) // 4
        start = (n - s) // 2
        block = np.zeros(n * n, dtype=bool)
        for j in range(start, start + s):
            for i in range(start, start + s):
                block[vid(i, j)] = True
        triangles = triangles[~block[triangles].any(axis=1)]
        kept = np.zeros(n * n, dtype=bool)
        kept[triangles.ravel()] = True
        remap = np.full(n * n, -1, dtype=np.int64)
        remap[kept] = np.arange(kept.sum())
        vertices, triangles, grasp = vertices[kept], remap[triangles], remap[grasp]

    return TriMesh(vertices, triangles), grasp


def make_ball(subdivisions: int = 2, radius: float = 0.2) -> tuple[TriMesh, np.ndarray]:
    """Icosphere centered at (0, 0, -radius), outward triangles, topmost vertex grasped."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    vertices = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    vertices = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in vertices]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]

    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoint_cache:
                m = vertices[a] + vertices[b]
                vertices.append(m / np.linalg.norm(m))
                midpoint_cache[key] = len(vertices) - 1
            return midpoint_cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined

    points = np.array(vertices)
    tris = np.array(faces, dtype=np.int64)
    normals = np.cross(points[tris[:, 1]] - points[tris[:, 0]], points[tris[:, 2]] - points[tris[:, 0]])
    inward = (normals * points[tris].mean(axis=1)).sum(axis=1) < 0
    tris[inward] = tris[inward][:, [0, 2, 1]]

    points = points * radius - np.array([0.0, 0.0, radius])
    grasp = np.array([int(np.argmax(points[:, 2]))], dtype=np.int64)
    return TriMesh(points, tris), grasp


# ============== Trajectories ==============

_AXES = {"X": np.array([1.0, 0.0, 0.0]), "Y": np.array([0.0, 1.0, 0.0]), "Z": np.array([0.0, 0.0, 1.0])}


def trajectory(kind: TrajectoryKind, base: np.ndarray, amplitude: float, period: float,
               n_frames: int, dt: float) -> np.ndarray:
    """
    Grasp targets (n_frames, g, 3). Translations move every grasp point by
    sign * amplitude * sin(2 pi t / period) along the axis; rotations turn them
    by that angle (radians) about the Z axis through their centroid.
    """
    kind = TrajectoryKind(kind)
    base = np.asarray(base, dtype=np.float64).reshape(-1, 3)
    sign = 1.0 if kind.value[0] == "+" else -1.0
    axis = kind.value[1]
    t = np.arange(n_frames) * dt
    signal = sign * amplitude * np.sin(2.0 * np.pi * t / period)

    if axis != "R":
        return base[None] + signal[:, None, None] * _AXES[axis][None, None]

    centroid = base.mean(axis=0)
    rel = base - centroid
    cos, sin = np.cos(signal)[:, None], np.sin(signal)[:, None]
    out = np.repeat(base[None], n_frames, axis=0)
    out[:, :, 0] = centroid[0] + cos * rel[None, :, 0] - sin * rel[None, :, 1]
    out[:, :, 1] = centroid[1] + sin * rel[None, :, 0] + cos * rel[None, :, 1]
    return out


# ============== Generation ==============

def generate(mesh: TriMesh, grasp: np.ndarray, cfg: SimConfig, targets: np.ndarray,
             n_frames: int, seed: int = 0, provenance: Optional[dict] = None) -> Dataset:
    """
    Frames 0 and 1 are both the rest shape with the first grasp target
    substituted, so the cloth starts at rest; the stored trajectory holds still
    for frame 1. The remaining frames come from the simulator.
    """
    if n_frames < 2:
        raise ShapeMismatchError(f"a sequence needs at least 2 frames, got {n_frames}")
    targets = np.array(targets, dtype=np.float64)
    if targets.shape[0] < n_frames:
        raise ShapeMismatchError(f"trajectory has {targets.shape[0]} frames, need {n_frames}")
    targets[1] = targets[0]
    model = build_model(mesh, cfg, grasp)

    started = time.perf_counter()
    initial = SimState.at_rest(model, targets[0])
    simulated = rollout(model, initial, targets[2:n_frames], n_frames - 2)
    frames = np.concatenate([initial.p_prev2[None], initial.p_prev1[None], simulated], axis=0)

    split = split_labels(n_frames)
    info = dict(provenance or {})
    info.update({
        "seed": seed,
        "n_frames": n_frames,
        "K": mesh.K,
        "train_frames": int((split == TRAIN).sum()),
        "test_frames": int((split == TEST).sum()),
    })
    logger.info(f"Generated {info.get('name', 'sequence')}: {n_frames} frames, K={mesh.K} in {time.perf_counter() - started:.2f}s")
    return Dataset(mesh=mesh, frames=frames, grasp=np.asarray(grasp, dtype=np.int64), trajectory=targets[:n_frames].copy(),
                   sim=cfg, split=split, provenance=info)


def build_mesh(spec: SequenceSpec) -> tuple[TriMesh, np.ndarray]:
    if spec.mesh == MeshKind.BALL:
        return make_ball(spec.ball_subdivisions, spec.ball_radius)
    return make_sheet(spec.resolution, spec.holes, spec.sheet_size)


def generate_sequence(spec: SequenceSpec, seed: int = 0) -> Dataset:
    """Mesh, grasp trajectory and simulation from a declarative spec."""
    mesh, grasp = build_mesh(spec)
    targets = trajectory(spec.trajectory, mesh.vertices[grasp], spec.amplitude, spec.period,
                         spec.n_frames, spec.sim.dt)
    logger.info(
        f"[{spec.name}] {spec.mesh.value} K={mesh.K}, {spec.trajectory.value}, "
        f"material={spec.sim.material.value}, stretch x{spec.sim.stretch_scale}, bend x{spec.sim.bend_scale}"
    )
    provenance = {"name": spec.name, "spec": spec.model_dump(mode="json")}
    return generate(mesh, grasp, spec.sim, targets, spec.n_frames, seed, provenance)
