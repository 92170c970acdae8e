"""
Thin-Shell Simulator
====================
Variational implicit Euler for cloth under grasp-point control.

Each frame minimizes

    L_phys(p) = ||p - 2 p_prev1 + p_prev2||^2_M / (2 dt^2) + P(p, q)

over the free vertices; grasped vertices are substituted with their targets q.
Energies are written once in torch (float64) and shared with the training
losses, so the simulator and the physics-based losses can never disagree.
"""

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch
from torch.func import hessian, vmap

from .config import MaterialKind, ObstacleConfig, SimConfig
from .errors import ConvergenceError, DivergenceError, RolloutError, ShapeMismatchError, ShellflowError
from .mesh import Adjacency, TriMesh, build_adjacency

logger = logging.getLogger("shellflow.sim")

DTYPE = torch.float64
ARMIJO_C = 1e-4
MAX_BACKTRACK = 30
DESCENT_COSINE = 1e-10


# ============== Element energies ==============
# Every energy takes element positions x with shape (..., v, 3) and
# per-element parameters broadcastable against the leading dims.

def spring_energy(x: torch.Tensor, rest: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Hooke spring k/2 (|d| - r)^2."""
    d = x[..., 1, :] - x[..., 0, :]
    length = torch.linalg.vector_norm(d, dim=-1)
    return 0.5 * k * (length - rest) ** 2


def membrane_energy(x: torch.Tensor, dm_inv: torch.Tensor, area: torch.Tensor,
                    mu: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """Saint Venant-Kirchhoff membrane on the 2D rest metric."""
    ds = torch.stack((x[..., 1, :] - x[..., 0, :], x[..., 2, :] - x[..., 0, :]), dim=-1)
    F = ds @ dm_inv
    E = 0.5 * (F.transpose(-1, -2) @ F - torch.eye(2, dtype=x.dtype))
    trace = E[..., 0, 0] + E[..., 1, 1]
    return area * (mu * (E ** 2).sum(dim=(-1, -2)) + 0.5 * lam * trace ** 2)


def dihedral_angle(x: torch.Tensor) -> torch.Tensor:
    """
    Signed angle between the normals of (x0, x1, x2) and (x1, x0, x3), where
    (x0, x1) is the shared edge. Zero for a flat hinge.
    """
    x0, x1, x2, x3 = x[..., 0, :], x[..., 1, :], x[..., 2, :], x[..., 3, :]
    e = x1 - x0
    n1 = torch.linalg.cross(e, x2 - x0, dim=-1)
    n2 = torch.linalg.cross(x3 - x0, e, dim=-1)
    sin_part = (torch.linalg.cross(n1, n2, dim=-1) * e).sum(-1) / torch.linalg.vector_norm(e, dim=-1)
    cos_part = (n1 * n2).sum(-1)
    return torch.atan2(sin_part, cos_part)


def hinge_energy(x: torch.Tensor, rest: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    return k * (dihedral_angle(x) - rest) ** 2


def contact_energy(x: torch.Tensor, center: torch.Tensor, radius: torch.Tensor,
                   k: torch.Tensor, margin: torch.Tensor) -> torch.Tensor:
    """Quadratic penetration penalty against an inflated sphere; x is (..., 1, 3)."""
    distance = torch.linalg.vector_norm(x[..., 0, :] - center, dim=-1)
    return k * torch.relu(radius + margin - distance) ** 2


# ============== Model ==============

@dataclass
class ElementTerm:
    """One family of elements sharing an energy function."""
    name: str
    indices: np.ndarray
    energy: Callable[..., torch.Tensor]
    params: tuple[torch.Tensor, ...]

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def value(self, x: torch.Tensor) -> torch.Tensor:
        return self.energy(x[self.index_tensor], *self.params).sum()

    @property
    def index_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.indices, dtype=torch.long)


@dataclass
class MaterialModel:
    """Stretch and bend elements with their rest quantities."""
    kind: MaterialKind
    terms: list[ElementTerm] = field(default_factory=list)

    def term(self, name: str) -> Optional[ElementTerm]:
        for term in self.terms:
            if term.name == name:
                return term
        return None


@dataclass
class ShellModel:
    """Everything the simulator needs for one mesh and grasp set."""
    mesh: TriMesh
    config: SimConfig
    adjacency: Adjacency
    material: MaterialModel
    mass: np.ndarray
    grasp: np.ndarray
    free: np.ndarray

    @property
    def K(self) -> int:
        return self.mesh.K

    @property
    def gravity(self) -> np.ndarray:
        return np.asarray(self.config.gravity, dtype=np.float64)

    @property
    def tol_newton(self) -> float:
        g = max(float(np.linalg.norm(self.gravity)), 1.0)
        return self.config.newton_tol_scale * self.K * float(self.mass.mean()) * g

    @property
    def free_dofs(self) -> np.ndarray:
        return (3 * np.flatnonzero(self.free)[:, None] + np.arange(3)).ravel()


def _rest_membrane(vertices: np.ndarray, triangles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse 2x2 rest edge matrices in each triangle's own plane, and rest areas."""
    x0, x1, x2 = (vertices[triangles[:, c]] for c in range(3))
    e1, e2 = x1 - x0, x2 - x0
    len1 = np.linalg.norm(e1, axis=1)
    u = e1 / len1[:, None]
    n = np.cross(e1, e2)
    double_area = np.linalg.norm(n, axis=1)
    v = np.cross(n / double_area[:, None], u)
    dm = np.zeros((triangles.shape[0], 2, 2))
    dm[:, 0, 0] = len1
    dm[:, 0, 1] = (e2 * u).sum(1)
    dm[:, 1, 1] = (e2 * v).sum(1)
    return np.linalg.inv(dm), 0.5 * double_area


def _pairs(rings: list[np.ndarray]) -> np.ndarray:
    pairs = [(i, j) for i, ring in enumerate(rings) for j in ring.tolist() if i < j]
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def build_material(mesh: TriMesh, adjacency: Adjacency, cfg: SimConfig) -> MaterialModel:
    v = mesh.vertices
    k_stretch = cfg.stretch_stiffness * cfg.stretch_scale
    k_bend = cfg.bend_stiffness * cfg.bend_scale
    material = MaterialModel(kind=cfg.material)

    if cfg.material == MaterialKind.MASS_SPRING:
        for name, rings, k in (("stretch", adjacency.one_ring, k_stretch), ("bend", adjacency.two_ring, k_bend)):
            pairs = _pairs(rings)
            rest = np.linalg.norm(v[pairs[:, 1]] - v[pairs[:, 0]], axis=1)
            material.terms.append(ElementTerm(
                name=name,
                indices=pairs,
                energy=spring_energy,
                params=(torch.as_tensor(rest, dtype=DTYPE), torch.full((len(pairs),), k, dtype=DTYPE)),
            ))
        return material

    nu = cfg.poisson_ratio
    mu = k_stretch / (2.0 * (1.0 + nu))
    lam = k_stretch * nu / (1.0 - nu ** 2)
    dm_inv, area = _rest_membrane(v, mesh.triangles)
    n_tri = mesh.n_triangles
    material.terms.append(ElementTerm(
        name="stretch",
        indices=mesh.triangles.copy(),
        energy=membrane_energy,
        params=(
            torch.as_tensor(dm_inv, dtype=DTYPE),
            torch.as_tensor(area, dtype=DTYPE),
            torch.full((n_tri,), mu, dtype=DTYPE),
            torch.full((n_tri,), lam, dtype=DTYPE),
        ),
    ))

    hinges = np.concatenate([adjacency.dihedral.edges, adjacency.dihedral.opposite], axis=1)
    with torch.no_grad():
        rest_angle = dihedral_angle(torch.as_tensor(v[hinges], dtype=DTYPE))
    material.terms.append(ElementTerm(
        name="bend",
        indices=hinges,
        energy=hinge_energy,
        params=(rest_angle, torch.full((len(hinges),), k_bend, dtype=DTYPE)),
    ))
    return material


def _contact_term(K: int, obstacle: ObstacleConfig) -> ElementTerm:
    return ElementTerm(
        name="collision",
        indices=np.arange(K, dtype=np.int64)[:, None],
        energy=contact_energy,
        params=(
            torch.as_tensor(obstacle.center, dtype=DTYPE).expand(K, 3),
            torch.full((K,), obstacle.radius, dtype=DTYPE),
            torch.full((K,), obstacle.stiffness, dtype=DTYPE),
            torch.full((K,), obstacle.margin, dtype=DTYPE),
        ),
    )


def build_model(mesh: TriMesh, cfg: SimConfig, grasp_indices, adjacency: Adjacency = None) -> ShellModel:
    grasp = np.asarray(grasp_indices, dtype=np.int64).ravel()
    if grasp.size and (grasp.min() < 0 or grasp.max() >= mesh.K):
        raise ShapeMismatchError(f"grasp indices must lie in [0, {mesh.K})")
    if np.unique(grasp).size != grasp.size:
        raise ShapeMismatchError("grasp indices must be distinct")

    adjacency = adjacency or build_adjacency(mesh)
    material = build_material(mesh, adjacency, cfg)
    if cfg.obstacle is not None:
        material.terms.append(_contact_term(mesh.K, cfg.obstacle))

    free = np.ones(mesh.K, dtype=bool)
    free[grasp] = False
    mass = np.full(mesh.K, cfg.total_mass / mesh.K)
    logger.debug(
        f"Built {cfg.material.value} model: K={mesh.K}, grasp={grasp.tolist()}, "
        f"elements={ {t.name: len(t) for t in material.terms} }"
    )
    return ShellModel(mesh=mesh, config=cfg, adjacency=adjacency, material=material,
                      mass=mass, grasp=grasp, free=free)


# ============== Energies (torch) ==============

def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def _check_positions(model: ShellModel, p) -> None:
    if tuple(p.shape) not in ((model.K, 3), (3 * model.K,)):
        raise ShapeMismatchError(f"positions have shape {tuple(p.shape)}, expected ({model.K}, 3)")


def substitute_grasp(model: ShellModel, p: torch.Tensor, q) -> torch.Tensor:
    """Out-of-place p[grasp] = q; gradients never reach the grasped rows of p."""
    if model.grasp.size == 0 or q is None:
        return p
    q = _tensor(q).reshape(-1, 3)
    if q.shape[0] != model.grasp.size:
        raise ShapeMismatchError(f"q has {q.shape[0]} rows for {model.grasp.size} grasped vertices")
    return p.index_put((torch.as_tensor(model.grasp),), q)


def potential_components(model: ShellModel, p: torch.Tensor, q=None) -> dict[str, torch.Tensor]:
    """Gravity plus one entry per element family, grasp already substituted."""
    x = substitute_grasp(model, _tensor(p).reshape(-1, 3), q)
    mass = torch.as_tensor(model.mass, dtype=DTYPE)
    gravity = torch.as_tensor(model.gravity, dtype=DTYPE)
    components = {"gravity": -(mass[:, None] * gravity * x).sum()}
    for term in model.material.terms:
        components[term.name] = term.value(x)
    return components


def potential_tensor(model: ShellModel, p: torch.Tensor, q=None, terms: Optional[tuple[str, ...]] = None) -> torch.Tensor:
    components = potential_components(model, p, q)
    if terms is not None:
        components = {k: v for k, v in components.items() if k in terms}
    return sum(components.values(), torch.zeros((), dtype=DTYPE))


def kinetic_tensor(model: ShellModel, p_prev2: torch.Tensor, p_prev1: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    mass = torch.as_tensor(model.mass, dtype=DTYPE)
    accel = p.reshape(-1, 3) - 2.0 * p_prev1.reshape(-1, 3) + p_prev2.reshape(-1, 3)
    return (mass[:, None] * accel ** 2).sum() / (2.0 * model.config.dt ** 2)


def physics_loss_tensor(model: ShellModel, p_prev2, p_prev1, p, q) -> torch.Tensor:
    """Differentiable L_phys; grasped rows of p are replaced by q."""
    x = substitute_grasp(model, _tensor(p).reshape(-1, 3), q)
    return kinetic_tensor(model, _tensor(p_prev2), _tensor(p_prev1), x) + potential_tensor(model, x)


# ============== Public numpy API ==============

def _finite(value: float, what: str, **diagnostics) -> float:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {what}", {k: float(v) for k, v in diagnostics.items()})
    return value


def potential_energy(model: ShellModel, p: np.ndarray, q=None) -> float:
    _check_positions(model, p)
    with torch.no_grad():
        components = potential_components(model, p, q)
    total = float(sum(v.item() for v in components.values()))
    return _finite(total, "potential energy", **{k: v.item() for k, v in components.items()})


def _grad(model: ShellModel, fn: Callable[[torch.Tensor], torch.Tensor], p: np.ndarray) -> tuple[float, np.ndarray]:
    x = _tensor(np.array(p, dtype=np.float64)).reshape(-1, 3).requires_grad_(True)
    value = fn(x)
    (grad,) = torch.autograd.grad(value, x)
    return value.item(), grad.detach().numpy()


def potential_gradient(model: ShellModel, p: np.ndarray, q=None) -> np.ndarray:
    """dP/dp as a (K, 3) array; grasped rows are zero."""
    _check_positions(model, p)
    value, grad = _grad(model, lambda x: potential_tensor(model, x, q), p)
    _finite(value, "potential energy")
    grad[model.grasp] = 0.0
    return grad


def physics_loss(model: ShellModel, p_prev2: np.ndarray, p_prev1: np.ndarray, p: np.ndarray, q=None) -> float:
    for arr in (p_prev2, p_prev1, p):
        _check_positions(model, arr)
    with torch.no_grad():
        value = physics_loss_tensor(model, p_prev2, p_prev1, p, q).item()
    return _finite(value, "physics loss")


def physics_gradient(model: ShellModel, p_prev2: np.ndarray, p_prev1: np.ndarray, p: np.ndarray, q=None) -> np.ndarray:
    """dL_phys/dp_m as a (K, 3) array over free DOFs (grasped rows are zero)."""
    for arr in (p_prev2, p_prev1, p):
        _check_positions(model, arr)
    value, grad = _grad(model, lambda x: physics_loss_tensor(model, p_prev2, p_prev1, x, q), p)
    _finite(value, "physics loss")
    grad[model.grasp] = 0.0
    return grad


def collision_penalty(p: np.ndarray, obstacle: ObstacleConfig) -> tuple[float, np.ndarray]:
    """Sphere penetration penalty and its (K, 3) gradient."""
    x = _tensor(np.array(p, dtype=np.float64)).reshape(-1, 1, 3).requires_grad_(True)
    K = x.shape[0]
    term = _contact_term(K, obstacle)
    value = term.energy(x, *term.params).sum()
    (grad,) = torch.autograd.grad(value, x)
    return value.item(), grad.reshape(K, 3).numpy()


# ============== Newton solver ==============

@dataclass
class SimState:
    """The two trailing frames, each (K, 3)."""
    p_prev2: np.ndarray
    p_prev1: np.ndarray

    def advance(self, p: np.ndarray) -> "SimState":
        return SimState(p_prev2=self.p_prev1, p_prev1=p)

    @classmethod
    def at_rest(cls, model: ShellModel, q=None) -> "SimState":
        p = model.mesh.vertices.copy()
        if q is not None and model.grasp.size:
            p[model.grasp] = np.asarray(q).reshape(-1, 3)
        return cls(p_prev2=p.copy(), p_prev1=p.copy())


@dataclass
class StepReport:
    iterations: int
    residual: float
    tolerance: float
    line_search_fallbacks: int = 0
    projected_steps: int = 0
    seconds: float = 0.0

    @property
    def converged(self) -> bool:
        return self.residual < self.tolerance


def _psd_project(blocks: np.ndarray) -> np.ndarray:
    """Clamp negative eigenvalues of symmetric element Hessians to zero."""
    blocks = 0.5 * (blocks + np.swapaxes(blocks, -1, -2))
    eigval, eigvec = np.linalg.eigh(blocks)
    return (eigvec * np.maximum(eigval, 0.0)[..., None, :]) @ np.swapaxes(eigvec, -1, -2)


def element_hessians(model: ShellModel, p: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """(dofs, blocks) per element family; blocks are the exact (n, 3v, 3v) element Hessians."""
    x = _tensor(p).reshape(-1, 3)
    parts = []
    for term in model.material.terms:
        if len(term) == 0:
            continue
        n, nv = term.indices.shape
        element_hessian = vmap(hessian(term.energy, argnums=0))
        blocks = element_hessian(x[term.index_tensor], *term.params).detach().numpy().reshape(n, 3 * nv, 3 * nv)
        dofs = (3 * term.indices[:, :, None] + np.arange(3)).reshape(n, 3 * nv)
        parts.append((dofs, blocks))
    return parts


def assemble_hessian(model: ShellModel, p: np.ndarray, project: bool = True,
                     parts: Optional[list[tuple[np.ndarray, np.ndarray]]] = None) -> sp.csr_matrix:
    """Hessian of L_phys w.r.t. all 3K coordinates; `project` clamps each element block to PSD."""
    K = model.K
    parts = element_hessians(model, p) if parts is None else parts
    rows, cols, vals = [], [], []

    for dofs, blocks in parts:
        width = dofs.shape[1]
        rows.append(np.repeat(dofs, width, axis=1).ravel())
        cols.append(np.tile(dofs, (1, width)).ravel())
        vals.append((_psd_project(blocks) if project else blocks).ravel())

    diag = np.arange(3 * K)
    rows.append(diag)
    cols.append(diag)
    vals.append(np.repeat(model.mass, 3) / model.config.dt ** 2)

    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(3 * K, 3 * K),
    ).tocsr()


def _descent_direction(H: sp.csc_matrix, g: np.ndarray) -> Optional[np.ndarray]:
    """-H^{-1} g, or None when the solve fails or the result does not point downhill."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", spla.MatrixRankWarning)
        d = -spla.spsolve(H, g)
    if not np.all(np.isfinite(d)):
        return None
    if float(g @ d) >= -DESCENT_COSINE * float(np.linalg.norm(g) * np.linalg.norm(d)):
        return None
    return d


def _backtrack(evaluate: Callable[[np.ndarray], float], x: np.ndarray, free_dofs: np.ndarray,
               d: np.ndarray, value: float, slope: float) -> Optional[np.ndarray]:
    """Armijo backtracking from the full step; None if no step length qualifies."""
    alpha = 1.0
    for _ in range(MAX_BACKTRACK):
        trial = x.copy()
        trial.reshape(-1)[free_dofs] += alpha * d
        if evaluate(trial) <= value + ARMIJO_C * alpha * slope:
            return trial
        alpha *= 0.5
    return None


def newton_solve(model: ShellModel, state: SimState, q, frame: Optional[int] = None) -> tuple[np.ndarray, StepReport]:
    """
    Minimize L_phys over the free DOFs starting from 2 p_prev1 - p_prev2.

    Each iteration tries the exact Hessian first. When it is indefinite enough
    that its Newton direction is not a descent direction, or the line search
    along it fails, the PSD-projected Hessian is used instead. Near the
    minimizer the exact Hessian is positive definite, so convergence ends
    quadratic.
    """
    started = time.perf_counter()
    tag = f"[FRAME {frame}] " if frame is not None else ""
    p_prev2 = _tensor(state.p_prev2).reshape(-1, 3)
    p_prev1 = _tensor(state.p_prev1).reshape(-1, 3)

    x = 2.0 * np.asarray(state.p_prev1, dtype=np.float64).reshape(-1, 3) - np.asarray(state.p_prev2).reshape(-1, 3)
    if model.grasp.size:
        x[model.grasp] = np.asarray(q, dtype=np.float64).reshape(-1, 3)

    def objective(y: torch.Tensor) -> torch.Tensor:
        return kinetic_tensor(model, p_prev2, p_prev1, y) + potential_tensor(model, y)

    def evaluate(y: np.ndarray) -> float:
        with torch.no_grad():
            return objective(_tensor(y)).item()

    free_dofs = model.free_dofs
    tol = model.tol_newton
    fallbacks = 0
    projected = 0
    residual = np.inf

    for iteration in range(model.config.max_newton + 1):
        value, grad = _grad(model, objective, x)
        _finite(value, "physics loss", iteration=iteration)
        g = grad.ravel()[free_dofs]
        residual = float(np.linalg.norm(g))
        logger.debug(f"{tag}Newton {iteration}: L={value:.12e} |g|={residual:.3e}")
        if residual < tol:
            report = StepReport(iterations=iteration, residual=residual, tolerance=tol,
                                line_search_fallbacks=fallbacks, projected_steps=projected,
                                seconds=time.perf_counter() - started)
            return x, report
        if iteration == model.config.max_newton:
            break

        parts = element_hessians(model, x)
        trial, last_direction = None, None
        for project in (False, True):
            H = assemble_hessian(model, x, project=project, parts=parts)[free_dofs][:, free_dofs].tocsc()
            d = _descent_direction(H, g)
            if d is None:
                continue
            last_direction = d
            trial = _backtrack(evaluate, x, free_dofs, d, value, float(g @ d))
            if trial is not None:
                projected += int(project)
                break

        if last_direction is None:
            raise DivergenceError(f"{tag}non-finite Newton direction", {"iteration": iteration, "residual": residual})
        if trial is None:
            # Roundoff-level decrease: take the full step if it still reduces the residual
            trial = x.copy()
            trial.reshape(-1)[free_dofs] += last_direction
            _, trial_grad = _grad(model, objective, trial)
            if np.linalg.norm(trial_grad.ravel()[free_dofs]) >= residual:
                raise ConvergenceError(iteration + 1, residual, x)
            fallbacks += 1
        x = trial

    raise ConvergenceError(model.config.max_newton, residual, x)


def step(model: ShellModel, state: SimState, q) -> np.ndarray:
    """One implicit Euler frame; returns the new (K, 3) positions."""
    p, _ = newton_solve(model, state, q)
    return p


def rollout(model: ShellModel, initial: SimState, trajectory: np.ndarray, n_frames: int) -> np.ndarray:
    """
    Simulate `n_frames` frames after the two initial ones. `trajectory[k]` holds
    the grasp targets of the k-th produced frame. Returns (n_frames, K, 3).
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if n_frames > 0 and trajectory.shape[0] < n_frames:
        raise ShapeMismatchError(f"trajectory has {trajectory.shape[0]} frames, need {n_frames}")

    frames = np.zeros((n_frames, model.K, 3))
    state = initial
    started = time.perf_counter()
    for k in range(n_frames):
        try:
            p, report = newton_solve(model, state, trajectory[k], frame=k)
        except ShellflowError as exc:
            logger.error(f"[FRAME {k}] Simulation failed: {exc}")
            raise RolloutError(k, exc) from exc
        frames[k] = p
        state = state.advance(p)
        logger.debug(f"[FRAME {k}] {report.iterations} Newton iterations, residual {report.residual:.3e}")

    if n_frames:
        logger.info(f"Rollout of {n_frames} frames finished in {time.perf_counter() - started:.2f}s")
    return frames
