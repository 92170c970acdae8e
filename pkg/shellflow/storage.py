"""
On-Disk Formats
===============
Dataset directories, model checkpoints, run manifests and CSV tables.

Dataset directory:
- manifest.json   format/version, sim config, grasp indices, split rule, provenance
- mesh.obj        reference mesh (triangles are read from here)
- rest.bin        reference vertices at full float64 precision
- frames.bin      header (magic, version, N, K) + little-endian float64, frame-major
- grasp.bin       grasp targets in the same layout (K = number of grasped vertices)

Checkpoint directory:
- model.sfck      named float64 tensors (nn_core container)
- checkpoint.json layer plan, seed, config hash, sim config, stage
"""

import json
import logging
import os
import struct
import subprocess
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from .config import SimConfig, TrainConfig
from .datagen import Dataset
from .errors import DatasetFormatError
from .latent_dyn import LatentMLP
from .mesh import TriMesh, build_adjacency, load_obj, save_obj
from .metrics import SPLIT_PERIOD, SPLIT_TRAIN
from .nn_core import Autoencoder, load_module_state, load_tensors, module_state, save_tensors

logger = logging.getLogger("shellflow.storage")

FRAMES_MAGIC = b"SFDS"
FRAMES_VERSION = 1
DATASET_FORMAT = "shellflow-dataset"
CHECKPOINT_FORMAT = "shellflow-checkpoint"


# ============== Binary frame files ==============

def write_frames(path: Union[str, Path], frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f8")
    N, K = frames.shape[0], frames.shape[1]
    header = FRAMES_MAGIC + struct.pack("<III", FRAMES_VERSION, N, K)
    Path(path).write_bytes(header + frames.tobytes())


def read_frames(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FRAMES_MAGIC:
        raise DatasetFormatError(f"{path}: not a frames file (bad magic)")
    version, N, K = struct.unpack_from("<III", data, 4)
    if version != FRAMES_VERSION:
        raise DatasetFormatError(f"{path}: unsupported frames version {version}")
    expected = 16 + 8 * N * K * 3
    if len(data) != expected:
        raise DatasetFormatError(f"{path}: expected {expected} bytes for N={N}, K={K}, found {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=16).reshape(N, K, 3).copy()


# ============== Datasets ==============

def save_dataset(dataset: Dataset, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_obj(dataset.mesh, directory / "mesh.obj")
    write_frames(directory / "rest.bin", dataset.mesh.vertices[None])
    write_frames(directory / "frames.bin", dataset.frames)
    write_frames(directory / "grasp.bin", dataset.trajectory)

    manifest = {
        "format": DATASET_FORMAT,
        "version": FRAMES_VERSION,
        "mesh": "mesh.obj",
        "frames": "frames.bin",
        "grasp_targets": "grasp.bin",
        "n_frames": dataset.n_frames,
        "K": dataset.mesh.K,
        "grasp": dataset.grasp.tolist(),
        "sim": dataset.sim.model_dump(mode="json"),
        "split_rule": {"period": SPLIT_PERIOD, "train": SPLIT_TRAIN},
        "split": dataset.split.tolist(),
        "provenance": dataset.provenance,
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Saved dataset '{dataset.name}' to {directory}")
    return directory


def load_dataset(directory: Union[str, Path]) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DatasetFormatError(f"{directory}: missing manifest.json")
    try:
        with open(manifest_path, "r") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"{manifest_path}: not a {DATASET_FORMAT} manifest")

    obj = load_obj(directory / manifest["mesh"])
    rest = read_frames(directory / "rest.bin")[0]
    mesh = TriMesh(rest, obj.triangles)
    frames = read_frames(directory / manifest["frames"])
    targets = read_frames(directory / manifest["grasp_targets"])
    if frames.shape[0] != manifest["n_frames"] or frames.shape[1] != mesh.K:
        raise DatasetFormatError(f"{directory}: frames file does not match the manifest")
    try:
        sim = SimConfig.model_validate(manifest["sim"])
    except ValidationError as exc:
        raise DatasetFormatError(f"{manifest_path}: invalid sim config ({exc})") from exc

    return Dataset(
        mesh=mesh,
        frames=frames,
        grasp=np.asarray(manifest["grasp"], dtype=np.int64),
        trajectory=targets,
        sim=sim,
        split=np.asarray(manifest["split"]),
        provenance=manifest.get("provenance", {}),
    )


# ============== Checkpoints ==============

@dataclass(eq=False)
class Checkpoint:
    """Self-contained model bundle: autoencoder, optional latent MLP, mesh and sim config."""
    mesh: TriMesh
    sim: SimConfig
    grasp: np.ndarray
    train: TrainConfig
    autoencoder: Autoencoder
    mlp: Optional[LatentMLP] = None
    stage: int = 1
    info: dict = field(default_factory=dict)


def save_checkpoint(checkpoint: Checkpoint, directory: Union[str, Path], config_hash: str = "") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {
        "mesh.vertices": checkpoint.mesh.vertices,
        "mesh.triangles": checkpoint.mesh.triangles.astype(np.float64),
        "grasp": checkpoint.grasp.astype(np.float64),
        **module_state(checkpoint.autoencoder, "ae."),
    }
    if checkpoint.mlp is not None:
        tensors.update(module_state(checkpoint.mlp, "mlp."))
    save_tensors(directory / "model.sfck", tensors)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "stage": checkpoint.stage,
        "seed": checkpoint.train.seed,
        "config_hash": config_hash,
        "layer_plan": checkpoint.autoencoder.layer_plan(),
        "mlp_plan": checkpoint.mlp.layer_plan() if checkpoint.mlp is not None else None,
        "sim": checkpoint.sim.model_dump(mode="json"),
        "train": checkpoint.train.model_dump(mode="json"),
        "info": checkpoint.info,
    }
    with open(directory / "checkpoint.json", "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Saved stage-{checkpoint.stage} checkpoint to {directory}")
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    directory = Path(directory)
    try:
        with open(directory / "checkpoint.json", "r") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"{directory}: unreadable checkpoint.json ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise DatasetFormatError(f"{directory}: not a {CHECKPOINT_FORMAT}")

    tensors = load_tensors(directory / "model.sfck")
    mesh = TriMesh(tensors["mesh.vertices"], tensors["mesh.triangles"].astype(np.int64))
    grasp = tensors["grasp"].astype(np.int64)
    train = TrainConfig.model_validate(manifest["train"])
    plan = manifest["layer_plan"]

    adjacency = build_adjacency(mesh)
    autoencoder = Autoencoder(adjacency, plan["latent_dim"], plan["conv_layers"], plan["slope"], train.seed)
    load_module_state(autoencoder, tensors, "ae.")

    mlp = None
    if manifest.get("mlp_plan"):
        mlp_plan = manifest["mlp_plan"]
        mlp = LatentMLP(mlp_plan["latent_dim"], mlp_plan["n_grasp"], mlp_plan["hidden"], mlp_plan["slope"], train.seed)
        load_module_state(mlp, tensors, "mlp.")

    return Checkpoint(
        mesh=mesh,
        sim=SimConfig.model_validate(manifest["sim"]),
        grasp=grasp,
        train=train,
        autoencoder=autoencoder,
        mlp=mlp,
        stage=manifest["stage"],
        info=manifest.get("info", {}),
    )


# ============== Run manifests / tables ==============

@dataclass
class RunManifest:
    """Everything needed to reproduce one CLI invocation."""
    command: str
    config_hash: str
    seed: int
    inputs: dict
    outputs: dict
    config: dict
    timings: dict = field(default_factory=dict)
    git_describe: str = "unknown"
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


def git_describe() -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=10, cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return result.stdout.strip() if result.returncode == 0 and result.stdout.strip() else "unknown"


def write_manifest(directory: Union[str, Path], manifest: RunManifest) -> Path:
    """Atomic write: temporary file then rename."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / "run_manifest.json"
    tmp = directory / ".run_manifest.json.tmp"
    with open(tmp, "w") as f:
        json.dump(asdict(manifest), f, indent=2, default=str)
    os.replace(tmp, target)
    return target


def write_table(path: Union[str, Path], rows: list[dict], columns: Optional[list[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, index=False, float_format="%.10g")
    return path
