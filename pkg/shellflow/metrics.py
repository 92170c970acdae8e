"""
Evaluation Metrics
==================
M_rms (vertex RMS error), M_STED (spatio-temporal edge difference) and M_phys
(squared free-DOF gradient of L_phys), plus the split bookkeeping used to
report them per Train/Test split.
"""

import logging
from typing import Optional

import numpy as np

from .config import MetricsConfig
from .errors import ShapeMismatchError
from .shell_sim import ShellModel, physics_gradient

logger = logging.getLogger("shellflow.metrics")

TRAIN, TEST = "train", "test"
SPLIT_PERIOD, SPLIT_TRAIN = 17, 12


def _pair(reference, candidate) -> tuple[np.ndarray, np.ndarray]:
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if reference.shape != candidate.shape:
        raise ShapeMismatchError(f"reference {reference.shape} and candidate {candidate.shape} differ")
    if reference.ndim != 3 or reference.shape[-1] != 3:
        raise ShapeMismatchError(f"sequences must be (N, K, 3), got {reference.shape}")
    return reference, candidate


# ============== M_rms ==============

def m_rms(reference, candidate, scale: float = 1000.0) -> float:
    """sqrt(mean over frames and vertices of |p - p_hat|^2), times `scale` (m -> mm by default)."""
    reference, candidate = _pair(reference, candidate)
    if reference.shape[0] == 0:
        return 0.0
    return float(scale * np.sqrt(((reference - candidate) ** 2).sum(-1).mean()))


# ============== M_STED ==============

def _edge_lengths(frames: np.ndarray, edges: np.ndarray) -> np.ndarray:
    return np.linalg.norm(frames[:, edges[:, 1]] - frames[:, edges[:, 0]], axis=-1)


def sted_spatial(reference, candidate, edges: np.ndarray) -> float:
    """
    Per frame and vertex: weighted standard deviation of the relative edge
    length differences over the incident edges, weights proportional to the
    reference edge length. Averaged over frames and vertices that have edges.
    """
    reference, candidate = _pair(reference, candidate)
    edges = np.asarray(edges, dtype=np.int64)
    K = reference.shape[1]
    ref_len = _edge_lengths(reference, edges)
    rel = (_edge_lengths(candidate, edges) - ref_len) / ref_len

    ends = np.concatenate([edges[:, 0], edges[:, 1]])
    w = np.concatenate([ref_len, ref_len], axis=1)
    d = np.concatenate([rel, rel], axis=1)

    weight_sum = np.zeros((reference.shape[0], K))
    mean = np.zeros((reference.shape[0], K))
    np.add.at(weight_sum.T, ends, w.T)
    np.add.at(mean.T, ends, (w * d).T)
    has_edges = weight_sum[0] > 0
    mean[:, has_edges] /= weight_sum[:, has_edges]

    var = np.zeros_like(mean)
    np.add.at(var.T, ends, (w * (d - mean[:, ends]) ** 2).T)
    var[:, has_edges] /= weight_sum[:, has_edges]
    return float(np.sqrt(np.maximum(var[:, has_edges], 0.0)).mean())


def sted_temporal(reference, candidate, edges: np.ndarray, time_scale: float = 1.0) -> float:
    """
    RMS relative length difference of the temporal edges joining a vertex to
    itself in the next frame; each temporal edge carries a virtual time extent
    of `time_scale` mean reference edge lengths.
    """
    reference, candidate = _pair(reference, candidate)
    if reference.shape[0] < 2:
        raise ShapeMismatchError("temporal term needs at least two frames")
    tau = time_scale * float(_edge_lengths(reference, np.asarray(edges)).mean())
    ref_len = np.sqrt((np.diff(reference, axis=0) ** 2).sum(-1) + tau ** 2)
    cand_len = np.sqrt((np.diff(candidate, axis=0) ** 2).sum(-1) + tau ** 2)
    return float(np.sqrt((((cand_len - ref_len) / ref_len) ** 2).mean()))


def m_sted(reference, candidate, edges: np.ndarray, weight: float = 0.5, time_scale: float = 1.0) -> float:
    """STED = STED_s + weight * STED_t."""
    return sted_spatial(reference, candidate, edges) + weight * sted_temporal(reference, candidate, edges, time_scale)


# ============== M_phys ==============

def m_phys(model: ShellModel, p_prev2, p_prev1, p, q) -> float:
    """|dL_phys/dp_m|^2 over the free DOFs."""
    grad = physics_gradient(model, p_prev2, p_prev1, p, q)
    return float((grad[model.free] ** 2).sum())


def m_phys_sequence(model: ShellModel, frames, q, indices, previous=None) -> float:
    """
    Mean M_phys over the triples (m-2, m-1, m) for every m in `indices` (m >= 2).
    The two trailing frames come from `previous` when given.
    """
    frames = np.asarray(frames, dtype=np.float64)
    previous = frames if previous is None else np.asarray(previous, dtype=np.float64)
    values = [m_phys(model, previous[m - 2], previous[m - 1], frames[m], q[m]) for m in indices if m >= 2]
    return float(np.mean(values)) if values else float("nan")


# ============== Splits ==============

def split_labels(n_frames: int) -> np.ndarray:
    """First 12 frames of every 17 are Train, the remaining 5 are Test."""
    return np.where(np.arange(n_frames) % SPLIT_PERIOD < SPLIT_TRAIN, TRAIN, TEST)


def split_blocks(split: np.ndarray, label: str) -> list[np.ndarray]:
    """Maximal runs of consecutive frames carrying `label`."""
    split = np.asarray(split)
    blocks, current = [], []
    for m, value in enumerate(split.tolist()):
        if value == label:
            current.append(m)
        elif current:
            blocks.append(np.array(current))
            current = []
    if current:
        blocks.append(np.array(current))
    return blocks


def evaluate_sequence(model: ShellModel, reference, candidate, q, split, cfg: Optional[MetricsConfig] = None,
                      previous=None, indices: Optional[np.ndarray] = None) -> dict[str, dict[str, float]]:
    """
    Metrics per split. `candidate[m]` is compared with `reference[m]` for the
    frames in `indices` (all frames by default). M_STED is averaged over the
    consecutive blocks of each split; M_phys is evaluated on the triple ending
    at each evaluated candidate frame, trailing frames taken from `previous`
    (defaults to the candidate itself).
    """
    cfg = cfg or MetricsConfig()
    reference, candidate = _pair(reference, candidate)
    split = np.asarray(split)
    evaluated = np.zeros(len(split), dtype=bool)
    evaluated[np.arange(len(split)) if indices is None else np.asarray(indices, dtype=np.int64)] = True
    edges = model.adjacency.edges

    results = {}
    for label in (TRAIN, TEST):
        frames = np.flatnonzero((split == label) & evaluated)
        if frames.size == 0:
            continue
        blocks = [b[evaluated[b]] for b in split_blocks(split, label)]
        blocks = [b for b in blocks if b.size >= 2]
        sted = [
            m_sted(reference[b], candidate[b], edges, cfg.sted_weight, cfg.sted_time_scale)
            for b in blocks
        ]
        results[label] = {
            "m_rms": m_rms(reference[frames], candidate[frames], cfg.rms_scale),
            "m_sted": float(np.mean(sted)) if sted else float("nan"),
            "m_phys": m_phys_sequence(model, candidate, q, frames, previous),
        }
        logger.debug(f"[{label.upper()}] {results[label]}")
    return results
