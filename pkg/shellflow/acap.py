"""
ACAP Features
=============
Per-vertex deformation gradients against a reference shape, polar
decomposition, consistent log-rotations, and the constrained Poisson
reconstruction that inverts the transform. The inverse is differentiable:
`acap_inverse_gradient` is the vector-Jacobian product, `AcapInverse` plugs it
into torch autograd.

Per vertex i the deformation gradient T_i minimizes

    sum_j c_ij |(p_i - p_j) - T (r_i - r_j)|^2 + w |nu_i(p) - T nu_i(r)|^2

with r the reference positions and nu = N / sqrt(|N|) the area-weighted
normal rescaled to length units. The normal term pins the out-of-plane column
of T for flat 1-rings.

Reconstruction stacks the tangential edge moments of every vertex, which T
determines exactly, plus a lightly weighted cotan Poisson term on the edges,

    sum_(i,j) c_ij |(p_i - p_j) - (T_i + T_j) (r_i - r_j) / 2|^2

whose only null space is the constants. On closed meshes the tangential
moments alone leave extra null modes.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
import torch
from scipy.spatial.transform import Rotation

from .errors import DegenerateElementError, ShapeMismatchError, SingularVertexError, SolverStateError
from .mesh import Adjacency, CotanWeights, TriMesh, build_adjacency, cotan_weights, vertex_normals

logger = logging.getLogger("shellflow.acap")

NORMAL_WEIGHT = 1.0
SINGULAR_RATIO = 1e-12
DEGENERATE_RATIO = 1e-10
SERIES_THRESHOLD = 0.05
# Cotan Poisson weight relative to the tangential-moment operator
GRAPH_WEIGHT = 1e-6
# Smallest admissible |pivot| of the saddle factorization, relative to the largest
SINGULAR_PIVOT = 1e-13

# Upper-triangle packing order of the symmetric stretch
SYM_ROWS = np.array([0, 0, 0, 1, 1, 2])
SYM_COLS = np.array([0, 1, 2, 1, 2, 2])


# ============== Small helpers ==============

def skew(v: np.ndarray) -> np.ndarray:
    """[v]x for (..., 3) vectors."""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1], out[..., 0, 2] = -v[..., 2], v[..., 1]
    out[..., 1, 0], out[..., 1, 2] = v[..., 2], -v[..., 0]
    out[..., 2, 0], out[..., 2, 1] = -v[..., 1], v[..., 0]
    return out


def _vee_antisym(g: np.ndarray) -> np.ndarray:
    """w(g) with <g, [v]x> = v . w(g)."""
    return np.stack([
        g[..., 2, 1] - g[..., 1, 2],
        g[..., 0, 2] - g[..., 2, 0],
        g[..., 1, 0] - g[..., 0, 1],
    ], axis=-1)


def pack_sym(S: np.ndarray) -> np.ndarray:
    return S[..., SYM_ROWS, SYM_COLS]


def unpack_sym(s: np.ndarray) -> np.ndarray:
    S = np.zeros(s.shape[:-1] + (3, 3))
    S[..., SYM_ROWS, SYM_COLS] = s
    S[..., SYM_COLS, SYM_ROWS] = s
    return S


def _rescaled_normals(normals: np.ndarray) -> np.ndarray:
    length = np.linalg.norm(normals, axis=-1, keepdims=True)
    scale = np.where(length > 0, 1.0 / np.sqrt(np.where(length > 0, length, 1.0)), 0.0)
    return normals * scale


# ============== Rodrigues ==============

def _rodrigues_coefficients(theta: np.ndarray) -> tuple[np.ndarray, ...]:
    """a, b of R = I + aK + bK^2 and their radial derivatives alpha, beta."""
    small = theta < SERIES_THRESHOLD
    t = np.where(small, 1.0, theta)
    t2 = theta ** 2
    a = np.where(small, 1.0 - t2 / 6.0 + t2 ** 2 / 120.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0 + t2 ** 2 / 720.0, 2.0 * np.sin(0.5 * t) ** 2 / t ** 2)
    alpha = np.where(small, -1.0 / 3.0 + t2 / 30.0 - t2 ** 2 / 840.0,
                     (t * np.cos(t) - np.sin(t)) / t ** 3)
    beta = np.where(small, -1.0 / 12.0 + t2 / 180.0 - t2 ** 2 / 6720.0,
                    (t * np.sin(t) - 4.0 * np.sin(0.5 * t) ** 2) / t ** 4)
    return a, b, alpha, beta


def rodrigues(omega: np.ndarray) -> np.ndarray:
    """exp([omega]x) for (..., 3) rotation vectors."""
    theta = np.linalg.norm(omega, axis=-1)
    a, b, _, _ = _rodrigues_coefficients(theta)
    K = skew(omega)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rodrigues_vjp(omega: np.ndarray, grad_R: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. R = exp([omega]x) back to omega."""
    theta = np.linalg.norm(omega, axis=-1)
    a, b, alpha, beta = _rodrigues_coefficients(theta)
    K = skew(omega)
    dot_K = (grad_R * K).sum(axis=(-1, -2))
    dot_K2 = (grad_R * (K @ K)).sum(axis=(-1, -2))
    return (
        (alpha * dot_K)[..., None] * omega
        + a[..., None] * _vee_antisym(grad_R)
        + (beta * dot_K2)[..., None] * omega
        - b[..., None] * _vee_antisym(grad_R @ K + K @ grad_R)
    )


# ============== Reference frame ==============

@dataclass(eq=False)
class ReferenceFrame:
    """
    Reference shape plus everything precomputed from it: per-vertex normal
    matrices G_i (and inverses), the sparse edge-moment operator B (3K x K),
    its tangential projection, the reconstruction matrix L (K x K) and the
    operator that maps stacked T_i^T (3K x 3) to the right-hand side.
    """
    mesh: TriMesh
    adjacency: Adjacency
    cotan: CotanWeights
    normals: np.ndarray       # (K, 3) rescaled reference normals
    G: np.ndarray             # (K, 3, 3)
    G_inv: np.ndarray         # (K, 3, 3)
    B: sp.csr_matrix          # (3K, K)
    B_proj: sp.csr_matrix     # (3K, K), projected off the reference normal
    L: sp.csr_matrix          # (K, K)
    rhs_operator: sp.csr_matrix  # (K, 3K)
    graph_weight: float
    normal_weight: float = NORMAL_WEIGHT

    @property
    def K(self) -> int:
        return self.mesh.K

    @classmethod
    def build(cls, mesh: TriMesh, adjacency: Adjacency = None, normal_weight: float = NORMAL_WEIGHT) -> "ReferenceFrame":
        adjacency = adjacency or build_adjacency(mesh)
        cotan = cotan_weights(mesh, adjacency)
        K = mesh.K
        r = mesh.vertices

        # Directed edges (i -> j) for both orientations of every unique edge
        src = np.concatenate([adjacency.edges[:, 0], adjacency.edges[:, 1]])
        dst = np.concatenate([adjacency.edges[:, 1], adjacency.edges[:, 0]])
        c = np.concatenate([cotan.values, cotan.values])
        e_hat = r[src] - r[dst]

        normals = _rescaled_normals(vertex_normals(mesh))
        G = normal_weight * normals[:, :, None] * normals[:, None, :]
        np.add.at(G, src, c[:, None, None] * e_hat[:, :, None] * e_hat[:, None, :])

        eig = np.linalg.eigvalsh(G)
        bad = eig[:, 0] <= SINGULAR_RATIO * np.maximum(eig[:, -1], 1e-300)
        if bad.any():
            raise SingularVertexError(int(np.flatnonzero(bad)[0]))
        G_inv = np.linalg.inv(G)

        # b_i(x) = sum_j c_ij e_hat_ij (x_i - x_j), one 3-vector per vertex
        rows = (3 * src[:, None] + np.arange(3)).ravel()
        weighted = (c[:, None] * e_hat).ravel()
        B = sp.coo_matrix(
            (np.concatenate([weighted, -weighted]),
             (np.concatenate([rows, rows]), np.concatenate([np.repeat(src, 3), np.repeat(dst, 3)]))),
            shape=(3 * K, K),
        ).tocsr()

        norm2 = (normals ** 2).sum(axis=1)
        proj = np.eye(3) - normals[:, :, None] * normals[:, None, :] / np.where(norm2 > 0, norm2, 1.0)[:, None, None]
        B_proj = (sp.block_diag(list(proj), format="csr") @ B).tocsr()
        L_moment = (B_proj.T @ B_proj).tocsr()

        # Weighted graph Laplacian and its edge-averaged right-hand side, (T_i + T_j) e_hat / 2
        L_graph = (sp.diags(np.bincount(src, weights=c, minlength=K))
                   - sp.coo_matrix((c, (src, dst)), shape=(K, K))).tocsr()
        half = 0.5 * c[:, None] * e_hat
        moment_cols = (3 * src[:, None] + np.arange(3)).ravel()
        other_cols = (3 * dst[:, None] + np.arange(3)).ravel()
        D = sp.coo_matrix(
            (np.concatenate([half.ravel(), half.ravel()]),
             (np.concatenate([np.repeat(src, 3), np.repeat(src, 3)]), np.concatenate([moment_cols, other_cols]))),
            shape=(K, 3 * K),
        ).tocsr()

        scale = abs(L_graph.diagonal().mean())
        beta = GRAPH_WEIGHT * L_moment.diagonal().mean() / scale if scale > 0 else 0.0
        L = (L_moment + beta * L_graph).tocsr()
        rhs_operator = (B_proj.T @ sp.block_diag(list(G), format="csr") + beta * D).tocsr()

        logger.debug(f"Reference frame: K={K}, edges={adjacency.n_edges}, nnz(L)={L.nnz}, graph weight {beta:.3e}")
        return cls(mesh=mesh, adjacency=adjacency, cotan=cotan, normals=normals, G=G, G_inv=G_inv,
                   B=B, B_proj=B_proj, L=L, rhs_operator=rhs_operator, graph_weight=beta,
                   normal_weight=normal_weight)


def _positions(ref: ReferenceFrame, p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-2:] == (ref.K, 3):
        return p
    if p.shape[-1:] == (3 * ref.K,):
        return p.reshape(p.shape[:-1] + (ref.K, 3))
    raise ShapeMismatchError(f"positions have shape {p.shape}, expected (..., {ref.K}, 3)")


def _features(ref: ReferenceFrame, feat) -> np.ndarray:
    feat = np.asarray(feat, dtype=np.float64)
    if feat.shape[-2:] == (ref.K, 9):
        return feat
    if feat.shape[-1:] == (9 * ref.K,):
        return feat.reshape(feat.shape[:-1] + (ref.K, 9))
    raise ShapeMismatchError(f"features have shape {feat.shape}, expected (..., {ref.K}, 9)")


# ============== Forward transform ==============

def deformation_gradients(ref: ReferenceFrame, p) -> np.ndarray:
    """Exact per-vertex least-squares T_i, shape (K, 3, 3)."""
    p = _positions(ref, p)
    if p.ndim != 2:
        raise ShapeMismatchError("deformation_gradients takes a single frame")
    M = (ref.B @ p).reshape(ref.K, 3, 3)
    nu = _rescaled_normals(vertex_normals(ref.mesh, p))
    F = np.swapaxes(M, 1, 2) + ref.normal_weight * nu[:, :, None] * ref.normals[:, None, :]
    return F @ ref.G_inv


def polar_decompose(T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """T = R S with det R = +1; accepts (3, 3) or (K, 3, 3)."""
    T = np.asarray(T, dtype=np.float64)
    single = T.ndim == 2
    T = T[None] if single else T
    U, sigma, Vt = np.linalg.svd(T)
    ratio = sigma[:, -1] / np.maximum(sigma[:, 0], 1e-300)
    degenerate = ratio < DEGENERATE_RATIO
    if degenerate.any():
        vertex = int(np.flatnonzero(degenerate)[0])
        raise DegenerateElementError(vertex, float(ratio[vertex]))

    flip = np.linalg.det(U @ Vt) < 0
    U[flip, :, 2] *= -1.0
    sigma[flip, 2] *= -1.0
    R = U @ Vt
    S = np.swapaxes(Vt, 1, 2) @ (sigma[:, :, None] * Vt)
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    return (R[0], S[0]) if single else (R, S)


def consistent_log(rotations: np.ndarray, adjacency: Adjacency) -> np.ndarray:
    """
    Rotation vectors with 2*pi branches chosen by breadth-first propagation
    over the 1-ring graph so neighbouring vectors stay close.
    """
    omega = Rotation.from_matrix(rotations).as_rotvec().reshape(-1, 3)
    K = omega.shape[0]
    theta = np.linalg.norm(omega, axis=1)
    axis = np.divide(omega, theta[:, None], out=np.zeros_like(omega), where=theta[:, None] > 0)
    visited = np.zeros(K, dtype=bool)

    for root in range(K):
        if visited[root]:
            continue
        visited[root] = True
        queue = deque([root])
        while queue:
            parent = queue.popleft()
            for child in adjacency.one_ring[parent].tolist():
                if visited[child]:
                    continue
                visited[child] = True
                queue.append(child)
                if theta[child] == 0.0:
                    continue
                candidates = axis[child] * (theta[child] + 2.0 * np.pi * np.array([0.0, -1.0, 1.0]))[:, None]
                best = np.argmin(np.linalg.norm(candidates - omega[parent], axis=1))
                omega[child] = candidates[best]
    return omega


def acap_forward(ref: ReferenceFrame, p) -> np.ndarray:
    """ACAP features (K, 9): [log-rotation (3), packed stretch (6)]."""
    T = deformation_gradients(ref, p)
    R, S = polar_decompose(T)
    omega = consistent_log(R, ref.adjacency)
    return np.concatenate([omega, pack_sym(S)], axis=1)


def acap_forward_frames(ref: ReferenceFrame, frames: np.ndarray) -> np.ndarray:
    """Features for every frame of a sequence, (N, K, 9)."""
    frames = _positions(ref, frames)
    return np.stack([acap_forward(ref, p) for p in frames.reshape(-1, ref.K, 3)])


def features_to_gradients(feat) -> np.ndarray:
    """T = exp(omega) S for (..., K, 9) features."""
    feat = np.asarray(feat, dtype=np.float64)
    return rodrigues(feat[..., :3]) @ unpack_sym(feat[..., 3:])


# ============== Poisson reconstruction ==============

class PoissonSolver:
    """
    Saddle system [[L, S^T], [S, 0]] for one (reference, grasp set), factorized
    once. Coordinates decouple, so the scalar system is shared by x, y and z.
    """

    def __init__(self, ref: ReferenceFrame, grasp, factorize: bool = True):
        self.ref = ref
        self.grasp = np.asarray(grasp, dtype=np.int64).ravel()
        self._lu: Optional[spla.SuperLU] = None
        if factorize:
            self.factorize()

    @property
    def factorized(self) -> bool:
        return self._lu is not None

    def factorize(self):
        if self.grasp.size == 0:
            raise SolverStateError("Poisson reconstruction needs at least one grasped vertex")
        K, g = self.ref.K, self.grasp.size
        select = sp.coo_matrix((np.ones(g), (np.arange(g), self.grasp)), shape=(g, K))
        saddle = sp.bmat([[self.ref.L, select.T], [select, None]], format="csc")
        try:
            lu = spla.splu(saddle)
        except RuntimeError as exc:
            raise SolverStateError(f"saddle system is singular ({exc})") from exc
        pivots = np.abs(lu.U.diagonal())
        if pivots.min() <= SINGULAR_PIVOT * pivots.max():
            raise SolverStateError(
                f"saddle system is numerically singular (pivot ratio {pivots.min() / pivots.max():.1e}); "
                "the mesh may be disconnected from every grasped vertex"
            )
        self._lu = lu
        logger.debug(f"Factorized saddle system: K={K}, grasp={self.grasp.tolist()}")

    def _require(self):
        if self._lu is None:
            raise SolverStateError("Poisson solver used before factorization")

    def solve(self, rhs: np.ndarray, q: np.ndarray) -> np.ndarray:
        """rhs (K, c), q (g, c) -> positions (K, c)."""
        self._require()
        if q.shape[0] != self.grasp.size:
            raise ShapeMismatchError(f"q has {q.shape[0]} rows, solver expects {self.grasp.size} grasp vertices")
        return self._lu.solve(np.vstack([rhs, q]))[: self.ref.K]

    def solve_adjoint(self, upstream: np.ndarray) -> np.ndarray:
        """The saddle matrix is symmetric, so the adjoint reuses the same factors."""
        self._require()
        zeros = np.zeros((self.grasp.size, upstream.shape[1]))
        return self._lu.solve(np.vstack([upstream, zeros]))[: self.ref.K]


def _batch(feat: np.ndarray, q: np.ndarray, solver: PoissonSolver) -> tuple[np.ndarray, np.ndarray, bool]:
    feat = _features(solver.ref, feat)
    q = np.asarray(q, dtype=np.float64)
    single = feat.ndim == 2
    feat = feat[None] if single else feat
    q = q.reshape(feat.shape[0], -1, 3)
    if q.shape[1] != solver.grasp.size:
        raise ShapeMismatchError(f"q has {q.shape[1]} rows, solver expects {solver.grasp.size} grasp vertices")
    return feat, q, single


def _columns(a: np.ndarray) -> np.ndarray:
    """(B, n, 3) -> (n, 3B)."""
    return np.swapaxes(a, 0, 1).reshape(a.shape[1], -1)


def _uncolumns(a: np.ndarray, batch: int) -> np.ndarray:
    """(n, 3B) -> (B, n, 3)."""
    return np.swapaxes(a.reshape(a.shape[0], batch, 3), 0, 1)


def acap_inverse(feat, q, solver: PoissonSolver) -> np.ndarray:
    """Positions (K, 3) (or (B, K, 3) for batched features) with p[grasp] = q."""
    feat, q, single = _batch(feat, q, solver)
    ref = solver.ref
    batch = feat.shape[0]
    T = features_to_gradients(feat)
    X = np.swapaxes(T, -1, -2).reshape(batch, 3 * ref.K, 3)
    rhs = ref.rhs_operator @ _columns(X)
    p = _uncolumns(solver.solve(rhs, _columns(q)), batch)
    return p[0] if single else p


def acap_inverse_gradient(feat, q, solver: PoissonSolver, upstream) -> np.ndarray:
    """Vector-Jacobian product of acap_inverse w.r.t. the features."""
    feat, q, single = _batch(feat, q, solver)
    ref = solver.ref
    batch = feat.shape[0]
    upstream = np.asarray(upstream, dtype=np.float64).reshape(batch, ref.K, 3)

    u = solver.solve_adjoint(_columns(upstream))
    grad_X = _uncolumns(ref.rhs_operator.T @ u, batch).reshape(batch, ref.K, 3, 3)
    grad_T = np.swapaxes(grad_X, -1, -2)

    omega = feat[..., :3]
    R = rodrigues(omega)
    S = unpack_sym(feat[..., 3:])
    grad_R = grad_T @ S
    grad_S = np.swapaxes(R, -1, -2) @ grad_T
    grad_s = grad_S[..., SYM_ROWS, SYM_COLS] + np.where(SYM_ROWS != SYM_COLS, grad_S[..., SYM_COLS, SYM_ROWS], 0.0)

    grad = np.concatenate([rodrigues_vjp(omega, grad_R), grad_s], axis=-1)
    return grad[0] if single else grad


class AcapInverse(torch.autograd.Function):
    """torch wrapper of acap_inverse; q is treated as data."""

    @staticmethod
    def forward(ctx, feat: torch.Tensor, q: torch.Tensor, solver: PoissonSolver):
        feat_np = feat.detach().cpu().numpy()
        q_np = q.detach().cpu().numpy()
        ctx.solver = solver
        ctx.save_for_backward(feat.detach(), q.detach())
        return torch.as_tensor(acap_inverse(feat_np, q_np, solver), dtype=feat.dtype)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        feat, q = ctx.saved_tensors
        grad = acap_inverse_gradient(feat.numpy(), q.numpy(), ctx.solver, grad_output.detach().numpy())
        return torch.as_tensor(grad, dtype=grad_output.dtype).reshape(feat.shape), None, None


def acap_inverse_torch(feat: torch.Tensor, q, solver: PoissonSolver) -> torch.Tensor:
    """Differentiable reconstruction for (K, 9) or (B, K, 9) feature tensors."""
    q = torch.as_tensor(np.asarray(q, dtype=np.float64)) if not isinstance(q, torch.Tensor) else q
    return AcapInverse.apply(feat, q.to(feat.dtype), solver)
