"""
Latent Dynamics
===============
Recurrent MLP advancing the latent state z_m = MLP(z_{m-2}, z_{m-1}, q_m),
its teacher-forced and physics-based losses, stage-2 / stage-3 training,
latent rollout and 3-frame prediction metrics.
"""

import logging
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .config import MetricsConfig, Stage2Weights, Stage3Weights, TrainConfig
from .embedding import (
    Pipeline,
    TrainHistory,
    TrainingData,
    _finite_or_raise,
    _triple_batch,
    physics_terms,
)
from .errors import ShapeMismatchError
from .metrics import TEST, TRAIN, evaluate_sequence
from .nn_core import DTYPE, Autoencoder, adam_step, backward, leaky_relu, make_adam, stop_gradient, uniform_init

logger = logging.getLogger("shellflow.train")


# ============== Latent MLP ==============

class LatentMLP(nn.Module):
    """
    Input concat(z_{m-2}, z_{m-1}, q_m - origin), hidden leaky-ReLU layers,
    linear output of width latent_dim. `origin` is the first-frame grasp
    centroid of the training sequence.
    """

    def __init__(self, latent_dim: int, n_grasp: int, hidden: Sequence[int] = (256, 256, 256),
                 slope: float = 0.1, seed: int = 0):
        super().__init__()
        self.latent_dim, self.n_grasp, self.slope = latent_dim, n_grasp, slope
        self.hidden = [int(h) for h in hidden]
        generator = torch.Generator().manual_seed(seed + 1)
        widths = [self.input_width, *self.hidden, latent_dim]
        self.layers = nn.ModuleList()
        for c_in, c_out in zip(widths[:-1], widths[1:]):
            layer = nn.Linear(c_in, c_out, dtype=DTYPE)
            with torch.no_grad():
                layer.weight.copy_(uniform_init((c_out, c_in), 1.0 / np.sqrt(c_in), generator))
                layer.bias.zero_()
            self.layers.append(layer)
        self.register_buffer("origin", torch.zeros(3, dtype=DTYPE))

    @property
    def input_width(self) -> int:
        return 2 * self.latent_dim + 3 * self.n_grasp

    def set_origin(self, q0) -> None:
        q0 = torch.as_tensor(np.asarray(q0, dtype=np.float64)).reshape(-1, 3)
        self.origin.copy_(q0.mean(dim=0))

    def grasp_features(self, q: torch.Tensor) -> torch.Tensor:
        if tuple(q.shape[-2:]) != (self.n_grasp, 3):
            raise ShapeMismatchError(f"grasp targets have shape {tuple(q.shape)}, expected (..., {self.n_grasp}, 3)")
        return (q - self.origin).reshape(*q.shape[:-2], 3 * self.n_grasp)

    def forward(self, z_prev2: torch.Tensor, z_prev1: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        for z in (z_prev2, z_prev1):
            if z.shape[-1] != self.latent_dim:
                raise ShapeMismatchError(f"latent code has width {z.shape[-1]}, expected {self.latent_dim}")
        x = torch.cat([z_prev2, z_prev1, self.grasp_features(q)], dim=-1)
        for layer in self.layers[:-1]:
            x = leaky_relu(layer(x), self.slope)
        return self.layers[-1](x)

    def layer_plan(self) -> dict:
        return {
            "latent_dim": self.latent_dim,
            "n_grasp": self.n_grasp,
            "input_width": self.input_width,
            "hidden": list(self.hidden),
            "slope": self.slope,
        }


def mlp_step(mlp: LatentMLP, z_prev2: torch.Tensor, z_prev1: torch.Tensor, q) -> torch.Tensor:
    q = q if isinstance(q, torch.Tensor) else torch.as_tensor(np.asarray(q, dtype=np.float64))
    return mlp(z_prev2, z_prev1, q)


def blend_latent(z: torch.Tensor, z_pred: torch.Tensor, blend: float = 0.5) -> torch.Tensor:
    """z' = blend * z_m + (1 - blend) * MLP(...)"""
    return blend * z + (1.0 - blend) * z_pred


def encode_sequence(ae: Autoencoder, features: torch.Tensor) -> torch.Tensor:
    """Encodings (N, latent) with no gradient."""
    with torch.no_grad():
        return ae.encode(features)


# ============== Losses ==============

def loss_sim(mlp: LatentMLP, z: torch.Tensor, q: torch.Tensor, ends: Optional[np.ndarray] = None) -> torch.Tensor:
    """Teacher-forced mean of |MLP(z_{m-2}, z_{m-1}, q_m) - z_m|^2 over the frames m in `ends`."""
    if z.shape[0] < 3:
        raise ShapeMismatchError(f"L_sim needs at least three frames, got {z.shape[0]}")
    ends = np.arange(2, z.shape[0]) if ends is None else np.asarray(ends, dtype=np.int64)
    idx = torch.as_tensor(ends)
    pred = mlp(z[idx - 2], z[idx - 1], q[idx])
    return ((pred - z[idx]) ** 2).sum(dim=-1).mean()


def unroll(mlp: LatentMLP, z_prev2: torch.Tensor, z_prev1: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Free-running latents for the grasp targets q (n, g, 3); returns (n, latent)."""
    latents = []
    for m in range(q.shape[0]):
        z = mlp(z_prev2, z_prev1, q[m])
        latents.append(z)
        z_prev2, z_prev1 = z_prev1, z
    if not latents:
        return z_prev1.new_zeros((0, mlp.latent_dim))
    return torch.stack(latents)


def loss_mphys(mlp: LatentMLP, ae: Autoencoder, pipeline: Pipeline, z_seed: torch.Tensor,
               q: torch.Tensor) -> torch.Tensor:
    """
    Unrolled L_phys. z_seed holds the latents of the first two frames, q the
    grasp targets (W, g, 3) of all W >= 3 window frames. Each term sees its two
    trailing decoded frames as constants; the recurrent chain stays intact.
    """
    if q.shape[0] < 3:
        raise ShapeMismatchError(f"L_mphys needs a window of at least three frames, got {q.shape[0]}")
    latents = torch.cat([z_seed, unroll(mlp, z_seed[0], z_seed[1], q[2:])], dim=0)
    positions = pipeline.reconstruct(ae.decode(latents), q)
    return physics_terms(pipeline.model, stop_gradient(positions[:-2]), stop_gradient(positions[1:-1]),
                         positions[2:], q[2:])


def one_step_mphys(mlp: LatentMLP, ae: Autoencoder, pipeline: Pipeline, z: torch.Tensor, q: torch.Tensor,
                   ends: np.ndarray) -> torch.Tensor:
    """Mean L_phys of one-step predictions against decoded ground-truth predecessors."""
    idx = torch.as_tensor(np.asarray(ends, dtype=np.int64))
    pred = mlp(z[idx - 2], z[idx - 1], q[idx])
    trailing = pipeline.reconstruct(ae.decode(torch.stack([z[idx - 2], z[idx - 1]], dim=1).reshape(-1, z.shape[-1])),
                                    torch.stack([q[idx - 2], q[idx - 1]], dim=1).reshape(-1, *q.shape[1:]))
    trailing = trailing.reshape(len(idx), 2, -1, 3)
    current = pipeline.reconstruct(ae.decode(pred), q[idx])
    return physics_terms(pipeline.model, stop_gradient(trailing[:, 0]), stop_gradient(trailing[:, 1]), current, q[idx])


def _eval_ends(data: TrainingData, split: str) -> np.ndarray:
    if split == TRAIN:
        return data.dataset.triples(TRAIN)
    return np.array([m for m in data.dataset.indices(split) if m >= 2], dtype=np.int64)


def unroll_windows(split: np.ndarray, length: int) -> np.ndarray:
    """Start frames of every window of `length` consecutive Train frames."""
    inside = np.asarray(split) == TRAIN
    return np.array([s for s in range(len(inside) - length + 1) if inside[s:s + length].all()], dtype=np.int64)


# ============== Stage 2 ==============

def stage2_losses(mlp: LatentMLP, ae: Autoencoder, pipeline: Pipeline, data: TrainingData, z: torch.Tensor,
                  split: str, weights: Stage2Weights) -> dict[str, float]:
    ends = _eval_ends(data, split)
    if not len(ends):
        return {}
    with torch.no_grad():
        sim = loss_sim(mlp, z, data.q, ends).item()
        mphys = one_step_mphys(mlp, ae, pipeline, z, data.q, ends).item()
    return {"sim": sim, "mphys": mphys, "total": weights.sim * sim + weights.mphys * mphys}


def train_stage2(data: TrainingData, ae: Autoencoder, mlp: LatentMLP, pipeline: Pipeline, cfg: TrainConfig,
                 weights: Optional[Stage2Weights] = None, epochs: Optional[int] = None) -> TrainHistory:
    """L_2 = sim + mphys (weighted); the autoencoder stays frozen."""
    weights = weights or cfg.stage2
    epochs = cfg.epochs_stage2 if epochs is None else epochs
    dataset = data.dataset
    frozen = [p.requires_grad for p in ae.parameters()]
    for p in ae.parameters():
        p.requires_grad_(False)

    z = encode_sequence(ae, data.features)
    mlp.set_origin(data.q[0])
    train_ends = dataset.triples(TRAIN)
    windows = unroll_windows(dataset.split, cfg.unroll)
    optimizer = make_adam(mlp.parameters(), cfg.lr, cfg.betas, cfg.eps)
    generator = torch.Generator().manual_seed(cfg.seed)
    history = TrainHistory()

    logger.info(
        f"[STAGE 2] {len(train_ends)} transitions, {len(windows)} unroll windows of {cfg.unroll}, "
        f"weights sim={weights.sim} mphys={weights.mphys}, {epochs} epochs"
    )
    try:
        for split in (TRAIN, TEST):
            losses = stage2_losses(mlp, ae, pipeline, data, z, split, weights)
            if losses:
                history.record(2, 0, split, losses)

        cursor = 0
        window_order = np.array([], dtype=np.int64)
        for epoch in range(1, epochs + 1):
            order = train_ends[torch.randperm(len(train_ends), generator=generator).numpy()]
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                parts = {"sim": loss_sim(mlp, z, data.q, batch)}
                loss = weights.sim * parts["sim"]
                if weights.mphys > 0 and len(windows):
                    if cursor >= len(window_order):
                        window_order = windows[torch.randperm(len(windows), generator=generator).numpy()]
                        cursor = 0
                    s = int(window_order[cursor])
                    cursor += 1
                    frames = slice(s, s + cfg.unroll)
                    parts["mphys"] = loss_mphys(mlp, ae, pipeline, z[s:s + 2], data.q[frames])
                    loss = loss + weights.mphys * parts["mphys"]
                values = {k: v.item() for k, v in parts.items()}
                _finite_or_raise(loss, 2, epoch, values)
                backward(loss)
                adam_step(optimizer)

            rows = {}
            for split in (TRAIN, TEST):
                losses = stage2_losses(mlp, ae, pipeline, data, z, split, weights)
                if losses:
                    rows[split] = history.record(2, epoch, split, losses)
            row = rows[TRAIN]
            logger.info(f"[STAGE 2] [EPOCH {epoch}] sim={row['sim']:.4e} mphys={row['mphys']:.4e} total={row['total']:.4e}")
    finally:
        for p, flag in zip(ae.parameters(), frozen):
            p.requires_grad_(flag)
    return history


# ============== Stage 3 ==============

def stage3_loss(ae: Autoencoder, mlp: LatentMLP, pipeline: Pipeline, data: TrainingData, ends: np.ndarray,
                weights: Stage3Weights, blend: float) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """All four components on the triples ending at `ends`, decoder fed with the blended latent."""
    features = _triple_batch(data.features, ends)
    q = _triple_batch(data.q, ends)
    idx = torch.as_tensor(ends)
    z = ae.encode(features)
    z_pred = mlp(z[:, 0], z[:, 1], q[:, 2])
    decoded = ae.decode(blend_latent(z[:, 2], z_pred, blend))

    parts = {
        "recon": ((decoded - data.features[idx]) ** 2).sum(dim=(-1, -2)).mean(),
        "sim": ((z_pred - z[:, 2]) ** 2).sum(dim=-1).mean(),
    }
    current = pipeline.reconstruct(decoded, q[:, 2])
    parts["vert"] = ((current - data.frames[idx]) ** 2).sum(dim=(-1, -2)).mean()
    if weights.ephys > 0:
        trailing = pipeline.reconstruct(ae.decode(z[:, :2].reshape(-1, z.shape[-1])), q[:, :2].reshape(-1, *q.shape[2:]))
        trailing = trailing.reshape(len(ends), 2, -1, 3)
        parts["ephys"] = physics_terms(pipeline.model, stop_gradient(trailing[:, 0]), stop_gradient(trailing[:, 1]),
                                       current, q[:, 2])
    total = sum(getattr(weights, name) * value for name, value in parts.items())
    return total, parts


def finetune_stage3(data: TrainingData, ae: Autoencoder, mlp: LatentMLP, pipeline: Pipeline, cfg: TrainConfig,
                    weights: Optional[Stage3Weights] = None, epochs: Optional[int] = None) -> TrainHistory:
    """Joint fine-tuning of autoencoder and MLP with L_3 = recon + vert + ephys + sim (weighted)."""
    weights = weights or cfg.stage3
    epochs = cfg.epochs_stage3 if epochs is None else epochs
    dataset = data.dataset
    train_ends = dataset.triples(TRAIN)
    optimizer = make_adam(list(ae.parameters()) + list(mlp.parameters()), cfg.lr, cfg.betas, cfg.eps)
    generator = torch.Generator().manual_seed(cfg.seed)
    history = TrainHistory()

    def evaluate(epoch: int) -> dict:
        rows = {}
        for split in (TRAIN, TEST):
            ends = _eval_ends(data, split)
            if not len(ends):
                continue
            with torch.no_grad():
                total, parts = stage3_loss(ae, mlp, pipeline, data, ends, weights, cfg.blend)
            rows[split] = history.record(3, epoch, split, {**{k: v.item() for k, v in parts.items()}, "total": total.item()})
        return rows

    logger.info(f"[STAGE 3] {len(train_ends)} triples, blend={cfg.blend}, {epochs} epochs")
    evaluate(0)
    for epoch in range(1, epochs + 1):
        order = train_ends[torch.randperm(len(train_ends), generator=generator).numpy()]
        for start in range(0, len(order), cfg.batch_size):
            loss, parts = stage3_loss(ae, mlp, pipeline, data, order[start:start + cfg.batch_size], weights, cfg.blend)
            _finite_or_raise(loss, 3, epoch, {k: v.item() for k, v in parts.items()})
            backward(loss)
            adam_step(optimizer)
        row = evaluate(epoch)[TRAIN]
        logger.info(
            f"[STAGE 3] [EPOCH {epoch}] recon={row['recon']:.4e} vert={row['vert']:.4e} "
            f"ephys={row['ephys']:.4e} sim={row['sim']:.4e} total={row['total']:.4e}"
        )
    return history


# ============== Rollout / prediction ==============

@dataclass
class RolloutResult:
    frames: np.ndarray
    latents: np.ndarray
    seconds: float

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


def rollout_latent(mlp: LatentMLP, ae: Autoencoder, pipeline: Pipeline, z_prev2, z_prev1, q) -> RolloutResult:
    """
    Predict the frames after the two seeds. q holds the grasp targets of all
    N frames (seeds included); the result has N - 2 frames.
    """
    q = torch.as_tensor(np.asarray(q, dtype=np.float64))
    z_prev2 = torch.as_tensor(np.asarray(z_prev2, dtype=np.float64))
    z_prev1 = torch.as_tensor(np.asarray(z_prev1, dtype=np.float64))
    K = pipeline.model.K

    started = time.perf_counter()
    with torch.no_grad():
        latents = unroll(mlp, z_prev2, z_prev1, q[2:])
        frames = (pipeline.reconstruct(ae.decode(latents), q[2:]).numpy() if latents.shape[0]
                  else np.zeros((0, K, 3)))
    seconds = time.perf_counter() - started
    logger.info(f"Latent rollout of {frames.shape[0]} frames in {seconds:.3f}s")
    return RolloutResult(frames=frames, latents=latents.numpy(), seconds=seconds)


def predict_three_frame(ae: Autoencoder, mlp: LatentMLP, pipeline: Pipeline, data: TrainingData) -> tuple[np.ndarray, np.ndarray]:
    """
    One-step predictions from encoded ground truth. Returns (candidate,
    previous): candidate[m] decodes MLP(E(f_{m-2}), E(f_{m-1}), q_m) for m >= 2,
    previous holds the plain reconstructions of every frame.
    """
    with torch.no_grad():
        z = ae.encode(data.features)
        previous = pipeline.reconstruct(ae.decode(z), data.q).numpy()
        candidate = previous.copy()
        if z.shape[0] > 2:
            pred = mlp(z[:-2], z[1:-1], data.q[2:])
            candidate[2:] = pipeline.reconstruct(ae.decode(pred), data.q[2:]).numpy()
    return candidate, previous


def evaluate_prediction(ae: Autoencoder, mlp: LatentMLP, pipeline: Pipeline, data: TrainingData,
                        cfg: Optional[MetricsConfig] = None) -> dict[str, dict[str, float]]:
    """M_rms / M_STED / M_phys of the 3-frame predictions per split."""
    dataset = data.dataset
    candidate, previous = predict_three_frame(ae, mlp, pipeline, data)
    return evaluate_sequence(pipeline.model, dataset.frames, candidate, dataset.trajectory, dataset.split, cfg,
                             previous=previous, indices=np.arange(2, dataset.n_frames))
