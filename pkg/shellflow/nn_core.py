"""
Network Core
============
Graph convolution on the 1-ring (and its exact transpose), the weight-tied
ACAP autoencoder, optimizer helpers and the named-tensor checkpoint format.
Everything runs in float64.
"""

import logging
import struct
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DatasetFormatError, ShapeMismatchError, UnrecordedForwardError
from .mesh import Adjacency

logger = logging.getLogger("shellflow.nn")

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1


# ============== Graph convolution ==============

def neighbor_mean_matrix(one_ring: list[np.ndarray]) -> torch.Tensor:
    """Sparse K x K operator averaging over each 1-ring; empty rings give zero rows."""
    K = len(one_ring)
    rows, cols, vals = [], [], []
    for i, ring in enumerate(one_ring):
        if len(ring) == 0:
            continue
        rows.extend([i] * len(ring))
        cols.extend(int(j) for j in ring)
        vals.extend([1.0 / len(ring)] * len(ring))
    indices = torch.tensor([rows, cols], dtype=torch.long).reshape(2, -1)
    return torch.sparse_coo_tensor(indices, torch.tensor(vals, dtype=DTYPE), (K, K)).coalesce()


def _apply_sparse(A: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """A @ x over the vertex axis of (..., K, c) features."""
    lead, (K, c) = x.shape[:-2], x.shape[-2:]
    flat = x.reshape(-1, K, c).permute(1, 0, 2).reshape(K, -1)
    out = torch.sparse.mm(A, flat)
    return out.reshape(K, -1, c).permute(1, 0, 2).reshape(*lead, K, c)


class GraphConv(nn.Module):
    """
    y_i = W x_i + W_N mean_{j in N(i)} x_j + b

    The transposed path shares W and W_N and carries its own bias.
    """

    def __init__(self, c_in: int, c_out: int, neighbor_mean: torch.Tensor, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        bound = 1.0 / np.sqrt(2 * c_in)
        self.weight = nn.Parameter(uniform_init((c_out, c_in), bound, generator))
        self.neighbor_weight = nn.Parameter(uniform_init((c_out, c_in), bound, generator))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=DTYPE))
        self.bias_t = nn.Parameter(torch.zeros(c_in, dtype=DTYPE))
        self.register_buffer("neighbor_mean", neighbor_mean, persistent=False)
        self.register_buffer("neighbor_mean_t", neighbor_mean.t().coalesce(), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_features(x, self.neighbor_mean.shape[0], self.c_in)
        return F.linear(x, self.weight, self.bias) + F.linear(_apply_sparse(self.neighbor_mean, x), self.neighbor_weight)

    def transpose(self, y: torch.Tensor) -> torch.Tensor:
        _check_features(y, self.neighbor_mean.shape[0], self.c_out)
        return y @ self.weight + _apply_sparse(self.neighbor_mean_t, y) @ self.neighbor_weight + self.bias_t


def _check_features(x: torch.Tensor, K: int, c: int):
    if x.dim() < 2 or tuple(x.shape[-2:]) != (K, c):
        raise ShapeMismatchError(f"features have shape {tuple(x.shape)}, expected (..., {K}, {c})")


def uniform_init(shape: tuple[int, ...], bound: float, generator: Optional[torch.Generator]) -> torch.Tensor:
    return (torch.rand(shape, generator=generator, dtype=DTYPE) * 2.0 - 1.0) * bound


def graph_conv(x: torch.Tensor, layer: GraphConv) -> torch.Tensor:
    return layer(x)


def graph_conv_transpose(y: torch.Tensor, layer: GraphConv) -> torch.Tensor:
    return layer.transpose(y)


def leaky_relu(x: torch.Tensor, slope: float = 0.1) -> torch.Tensor:
    return F.leaky_relu(x, negative_slope=slope)


def fc(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    return F.linear(x, weight, bias)


# ============== Autoencoder ==============

class Autoencoder(nn.Module):
    """
    E = F . C_1 ... C_L and D = C_L^T ... C_1^T . F^T with shared weights.
    Works on standardized ACAP features; encode/decode take and return raw
    (K, 9) features.
    """

    def __init__(self, adjacency: Adjacency, latent_dim: int = 128, conv_layers: int = 2,
                 slope: float = 0.1, seed: int = 0):
        super().__init__()
        K = len(adjacency.one_ring)
        self.K, self.latent_dim, self.slope = K, latent_dim, slope
        generator = torch.Generator().manual_seed(seed)
        A = neighbor_mean_matrix(adjacency.one_ring)
        self.convs = nn.ModuleList([GraphConv(9, 9, A, generator) for _ in range(conv_layers)])
        self.fc_weight = nn.Parameter(uniform_init((latent_dim, 9 * K), 1.0 / np.sqrt(9 * K), generator))
        self.fc_bias = nn.Parameter(torch.zeros(latent_dim, dtype=DTYPE))
        self.fc_bias_t = nn.Parameter(torch.zeros(9 * K, dtype=DTYPE))
        self.register_buffer("feature_mean", torch.zeros(9, dtype=DTYPE))
        self.register_buffer("feature_std", torch.ones(9, dtype=DTYPE))

    def set_feature_scaling(self, features) -> None:
        """Per-channel mean/std over (frames, vertices)."""
        feats = torch.as_tensor(np.asarray(features, dtype=np.float64)).reshape(-1, 9)
        std = feats.std(dim=0, correction=0)
        self.feature_mean.copy_(feats.mean(dim=0))
        self.feature_std.copy_(torch.where(std > 1e-8, std, torch.ones_like(std)))

    def encode(self, feat: torch.Tensor) -> torch.Tensor:
        _check_features(feat, self.K, 9)
        x = (feat - self.feature_mean) / self.feature_std
        for conv in reversed(self.convs):
            x = leaky_relu(conv(x), self.slope)
        return fc(x.reshape(*x.shape[:-2], 9 * self.K), self.fc_weight, self.fc_bias)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ShapeMismatchError(f"latent code has width {z.shape[-1]}, expected {self.latent_dim}")
        x = (z @ self.fc_weight + self.fc_bias_t).reshape(*z.shape[:-1], self.K, 9)
        for conv in self.convs:
            x = conv.transpose(leaky_relu(x, self.slope))
        return x * self.feature_std + self.feature_mean

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(feat))

    def layer_plan(self) -> dict:
        return {
            "K": self.K,
            "latent_dim": self.latent_dim,
            "conv_layers": len(self.convs),
            "channels": [9] * (len(self.convs) + 1),
            "slope": self.slope,
        }


# ============== Gradients / optimizer ==============

def backward(loss: torch.Tensor, module: Optional[nn.Module] = None) -> dict[str, torch.Tensor]:
    """Backpropagate a scalar loss; returns the module's gradients by name."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise UnrecordedForwardError("loss has no recorded forward graph")
    loss.backward()
    if module is None:
        return {}
    return {name: p.grad for name, p in module.named_parameters() if p.grad is not None}


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def make_adam(params: Iterable[nn.Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas), eps=eps)


def adam_step(optimizer: torch.optim.Adam) -> None:
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)


# ============== Checkpoint container ==============

def save_tensors(path: Union[str, Path], tensors: dict[str, Union[np.ndarray, torch.Tensor]]) -> None:
    """magic, version, count, then per tensor: name, rank, shape, '<f8' payload."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        array = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        array = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape))
        chunks.append(array.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: Union[str, Path]) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise DatasetFormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported checkpoint version {version}")

    offset = 12
    tensors = {}
    try:
        for _ in range(count):
            (length,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + length].decode("utf-8")
            offset += length
            (rank,) = struct.unpack_from("<I", data, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}Q", data, offset)
            offset += 8 * rank
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
            offset += 8 * size
    except (struct.error, ValueError) as exc:
        raise DatasetFormatError(f"{path}: truncated checkpoint ({exc})") from exc
    return tensors


def module_state(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    """Persistent parameters and buffers, prefixed for one checkpoint file."""
    return {f"{prefix}{name}": value for name, value in module.state_dict().items()}


def load_module_state(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for name, current in module.state_dict().items():
        key = f"{prefix}{name}"
        if key not in tensors:
            raise DatasetFormatError(f"checkpoint is missing tensor '{key}'")
        if tuple(tensors[key].shape) != tuple(current.shape):
            raise DatasetFormatError(f"tensor '{key}' has shape {tensors[key].shape}, expected {tuple(current.shape)}")
        state[name] = torch.as_tensor(tensors[key], dtype=current.dtype)
    module.load_state_dict(state)
