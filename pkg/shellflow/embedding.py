"""
Mesh Embedding
==============
Autoencoder losses over ACAP features (L_recon, L_vert, L_ephys), stage-1
training, cloth inverse kinematics and reconstruction metrics.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
import torch

from .acap import PoissonSolver, ReferenceFrame, acap_forward_frames, acap_inverse_torch
from .config import IkConfig, MetricsConfig, SimConfig, Stage1Weights, TrainConfig
from .datagen import Dataset
from .errors import DivergenceError
from .metrics import TEST, TRAIN, evaluate_sequence
from .mesh import TriMesh, build_adjacency
from .nn_core import Autoencoder, adam_step, backward, make_adam, stop_gradient
from .shell_sim import ShellModel, build_model, physics_loss_tensor, potential_tensor

logger = logging.getLogger("shellflow.train")

HISTORY_COLUMNS = ["stage", "epoch", "split", "recon", "vert", "ephys", "sim", "mphys", "total"]

# IkResult.status values
IK_CONVERGED = "converged"
IK_LINE_SEARCH_FAILED = "line_search_failed"
IK_MAX_ITER = "max_iter"


# ============== Pipeline / data ==============

@dataclass(eq=False)
class Pipeline:
    """Simulator model, ACAP reference and factorized Poisson solver for one mesh and grasp set."""
    model: ShellModel
    ref: ReferenceFrame
    solver: PoissonSolver

    @classmethod
    def build(cls, mesh: TriMesh, sim: SimConfig, grasp) -> "Pipeline":
        adjacency = build_adjacency(mesh)
        model = build_model(mesh, sim, grasp, adjacency)
        ref = ReferenceFrame.build(mesh, adjacency)
        return cls(model=model, ref=ref, solver=PoissonSolver(ref, model.grasp))

    def reconstruct(self, feat: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        return acap_inverse_torch(feat, q, self.solver)


@dataclass(eq=False)
class TrainingData:
    """Tensors of one dataset: features (N, K, 9), frames (N, K, 3), grasp targets (N, g, 3)."""
    dataset: Dataset
    features: torch.Tensor
    frames: torch.Tensor
    q: torch.Tensor

    @classmethod
    def from_dataset(cls, dataset: Dataset, ref: ReferenceFrame) -> "TrainingData":
        started = time.perf_counter()
        features = acap_forward_frames(ref, dataset.frames)
        logger.info(f"ACAP features for {dataset.n_frames} frames in {time.perf_counter() - started:.2f}s")
        return cls(
            dataset=dataset,
            features=torch.as_tensor(features),
            frames=torch.as_tensor(dataset.frames),
            q=torch.as_tensor(dataset.trajectory),
        )


@dataclass
class TrainHistory:
    """One row per (stage, epoch, split); missing components are NaN."""
    rows: list[dict] = field(default_factory=list)

    def record(self, stage: int, epoch: int, split: str, losses: dict[str, float]) -> dict:
        row = {c: float("nan") for c in HISTORY_COLUMNS}
        row.update(stage=stage, epoch=epoch, split=split, **losses)
        self.rows.append(row)
        return row

    def series(self, split: str, key: str, stage: Optional[int] = None) -> list[float]:
        return [r[key] for r in self.rows if r["split"] == split and (stage is None or r["stage"] == stage)]

    def extend(self, other: "TrainHistory") -> "TrainHistory":
        self.rows.extend(other.rows)
        return self

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=HISTORY_COLUMNS)


# ============== Losses ==============

def loss_recon(ae: Autoencoder, features: torch.Tensor) -> torch.Tensor:
    """Mean over frames of |D(E(f)) - f|^2."""
    diff = ae(features) - features
    return (diff ** 2).sum(dim=(-1, -2)).mean()


def loss_vert(ae: Autoencoder, features: torch.Tensor, frames: torch.Tensor, q: torch.Tensor,
              pipeline: Pipeline) -> torch.Tensor:
    """Mean over frames of |ACAP^-1(D(E(f)), q) - p|^2."""
    positions = pipeline.reconstruct(ae(features), q)
    return ((positions - frames) ** 2).sum(dim=(-1, -2)).mean()


def physics_terms(model: ShellModel, prev2: torch.Tensor, prev1: torch.Tensor, current: torch.Tensor,
                  q: torch.Tensor) -> torch.Tensor:
    """Mean L_phys over a batch of triples, each tensor (B, K, 3)."""
    terms = [physics_loss_tensor(model, prev2[b], prev1[b], current[b], q[b]) for b in range(current.shape[0])]
    return torch.stack(terms).mean()


def loss_ephys_latent(ae: Autoencoder, z: torch.Tensor, q: torch.Tensor, pipeline: Pipeline) -> torch.Tensor:
    """
    L_phys on decoded triples. z is (B, 3, latent) for frames (m-2, m-1, m),
    q is (B, 3, g, 3). The first two decoded frames are cut from the graph.
    """
    B = z.shape[0]
    positions = pipeline.reconstruct(ae.decode(z.reshape(3 * B, -1)), q.reshape(3 * B, -1, 3)).reshape(B, 3, -1, 3)
    return physics_terms(pipeline.model, stop_gradient(positions[:, 0]), stop_gradient(positions[:, 1]),
                         positions[:, 2], q[:, 2])


def loss_ephys(ae: Autoencoder, features: torch.Tensor, q: torch.Tensor, pipeline: Pipeline) -> torch.Tensor:
    """features (B, 3, K, 9) of consecutive frames; each frame is encoded and decoded on its own."""
    return loss_ephys_latent(ae, ae.encode(features), q, pipeline)


def _triple_batch(tensor: torch.Tensor, ends: np.ndarray) -> torch.Tensor:
    index = torch.as_tensor(np.stack([ends - 2, ends - 1, ends], axis=1))
    return tensor[index]


def _finite_or_raise(loss: torch.Tensor, stage: int, epoch: int, parts: dict[str, float]):
    if not torch.isfinite(loss):
        logger.error(f"[STAGE {stage}] [EPOCH {epoch}] Non-finite loss: {parts}")
        raise DivergenceError(f"stage {stage} loss became non-finite at epoch {epoch}",
                              {"epoch": epoch, **parts})


# ============== Stage 1 ==============

def stage1_loss(ae: Autoencoder, data: TrainingData, pipeline: Pipeline, frames: np.ndarray,
                triple_ends: np.ndarray, weights: Stage1Weights) -> tuple[torch.Tensor, dict[str, float]]:
    idx = torch.as_tensor(frames)
    parts: dict[str, torch.Tensor] = {"recon": loss_recon(ae, data.features[idx])}
    total = weights.recon * parts["recon"]
    if weights.vert > 0:
        parts["vert"] = loss_vert(ae, data.features[idx], data.frames[idx], data.q[idx], pipeline)
        total = total + weights.vert * parts["vert"]
    if weights.ephys > 0 and len(triple_ends):
        parts["ephys"] = loss_ephys(ae, _triple_batch(data.features, triple_ends),
                                    _triple_batch(data.q, triple_ends), pipeline)
        total = total + weights.ephys * parts["ephys"]
    return total, {k: v.item() for k, v in parts.items()}


def embedding_losses(ae: Autoencoder, data: TrainingData, pipeline: Pipeline, split: str,
                     weights: Stage1Weights) -> dict[str, float]:
    """All three components on one split, no gradients."""
    dataset = data.dataset
    frames = dataset.indices(split)
    ends = np.array([m for m in frames if m >= 2], dtype=np.int64)
    if split == TRAIN:
        ends = dataset.triples(TRAIN)
    with torch.no_grad():
        idx = torch.as_tensor(frames)
        recon = loss_recon(ae, data.features[idx]).item()
        vert = loss_vert(ae, data.features[idx], data.frames[idx], data.q[idx], pipeline).item()
        ephys = (loss_ephys(ae, _triple_batch(data.features, ends), _triple_batch(data.q, ends), pipeline).item()
                 if len(ends) else float("nan"))
    total = weights.recon * recon + weights.vert * vert + (weights.ephys * ephys if len(ends) else 0.0)
    return {"recon": recon, "vert": vert, "ephys": ephys, "total": total}


def train_stage1(data: TrainingData, ae: Autoencoder, pipeline: Pipeline, cfg: TrainConfig,
                 weights: Optional[Stage1Weights] = None, epochs: Optional[int] = None) -> TrainHistory:
    """L_1 = recon + vert + ephys (weighted); Adam over the autoencoder parameters."""
    weights = weights or cfg.stage1
    epochs = cfg.epochs_stage1 if epochs is None else epochs
    dataset = data.dataset
    train_frames = dataset.indices(TRAIN)
    train_triples = set(dataset.triples(TRAIN).tolist())

    ae.set_feature_scaling(data.features[torch.as_tensor(train_frames)].numpy())
    optimizer = make_adam(ae.parameters(), cfg.lr, cfg.betas, cfg.eps)
    generator = torch.Generator().manual_seed(cfg.seed)
    history = TrainHistory()

    logger.info(
        f"[STAGE 1] {len(train_frames)} train frames, {len(train_triples)} triples, "
        f"weights recon={weights.recon} vert={weights.vert} ephys={weights.ephys}, {epochs} epochs"
    )
    for split in (TRAIN, TEST):
        if len(dataset.indices(split)):
            history.record(1, 0, split, embedding_losses(ae, data, pipeline, split, weights))

    for epoch in range(1, epochs + 1):
        order = train_frames[torch.randperm(len(train_frames), generator=generator).numpy()]
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            ends = np.array([m for m in batch if m in train_triples], dtype=np.int64)
            loss, parts = stage1_loss(ae, data, pipeline, batch, ends, weights)
            _finite_or_raise(loss, 1, epoch, parts)
            backward(loss)
            adam_step(optimizer)

        rows = {}
        for split in (TRAIN, TEST):
            if len(dataset.indices(split)):
                rows[split] = history.record(1, epoch, split, embedding_losses(ae, data, pipeline, split, weights))
        train_row = rows[TRAIN]
        logger.info(
            f"[STAGE 1] [EPOCH {epoch}] recon={train_row['recon']:.4e} vert={train_row['vert']:.4e} "
            f"ephys={train_row['ephys']:.4e} total={train_row['total']:.4e}"
        )
        if not math.isfinite(train_row["total"]):
            raise DivergenceError(f"stage 1 evaluation became non-finite at epoch {epoch}", {"epoch": epoch})
    return history


# ============== Inverse kinematics ==============

@dataclass
class IkResult:
    z: np.ndarray
    positions: np.ndarray
    objective: list[float]
    iterations: int
    grad_norm: float
    status: str

    @property
    def converged(self) -> bool:
        return self.status == IK_CONVERGED


def ik_objective(ae: Autoencoder, pipeline: Pipeline, z: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """(P_s + P_b) of the decoded, reconstructed shape."""
    positions = pipeline.reconstruct(ae.decode(z), q)
    return potential_tensor(pipeline.model, positions, q, terms=("stretch", "bend"))


def ik_solve(ae: Autoencoder, pipeline: Pipeline, q, z0, cfg: Optional[IkConfig] = None) -> IkResult:
    """Gradient descent with backtracking over the latent code."""
    cfg = cfg or IkConfig()
    q = torch.as_tensor(np.asarray(q, dtype=np.float64)).reshape(-1, 3)
    z = torch.as_tensor(np.asarray(z0, dtype=np.float64)).clone()

    def value_and_grad(point: torch.Tensor) -> tuple[float, torch.Tensor]:
        point = point.detach().requires_grad_(True)
        value = ik_objective(ae, pipeline, point, q)
        (grad,) = torch.autograd.grad(value, point)
        return value.item(), grad

    value, grad = value_and_grad(z)
    if not math.isfinite(value):
        raise DivergenceError("IK objective is non-finite at the initial code", {"value": value})
    objective = [value]
    alpha = cfg.step
    status = IK_MAX_ITER
    iteration = 0

    for iteration in range(1, cfg.max_iter + 1):
        grad_sq = float((grad ** 2).sum())
        if math.sqrt(grad_sq) <= cfg.grad_tol:
            status = IK_CONVERGED
            break
        accepted = False
        for _ in range(60):
            trial = z - alpha * grad
            with torch.no_grad():
                trial_value = ik_objective(ae, pipeline, trial, q).item()
            if math.isfinite(trial_value) and trial_value <= value - 1e-4 * alpha * grad_sq:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status = IK_LINE_SEARCH_FAILED
            break
        z = trial
        value, grad = value_and_grad(z)
        objective.append(value)
        alpha *= 2.0

    grad_norm = float(torch.linalg.vector_norm(grad))
    if status == IK_MAX_ITER:
        logger.warning(f"IK stopped at the iteration cap ({cfg.max_iter}), |grad|={grad_norm:.3e}")
    elif status == IK_LINE_SEARCH_FAILED:
        logger.warning(f"IK line search found no decrease at iteration {iteration}, |grad|={grad_norm:.3e}")
    with torch.no_grad():
        positions = pipeline.reconstruct(ae.decode(z), q).numpy()
    return IkResult(z=z.detach().numpy(), positions=positions, objective=objective,
                    iterations=iteration, grad_norm=grad_norm, status=status)


# ============== Evaluation ==============

def reconstruct_frames(ae: Autoencoder, data: TrainingData, pipeline: Pipeline) -> np.ndarray:
    with torch.no_grad():
        return pipeline.reconstruct(ae(data.features), data.q).numpy()


def evaluate_embedding(ae: Autoencoder, data: TrainingData, pipeline: Pipeline,
                       cfg: Optional[MetricsConfig] = None) -> dict[str, dict[str, float]]:
    """M_rms / M_STED / M_phys of the autoencoder reconstructions per split."""
    dataset = data.dataset
    candidate = reconstruct_frames(ae, data, pipeline)
    return evaluate_sequence(pipeline.model, dataset.frames, candidate, dataset.trajectory, dataset.split, cfg)
