"""
Run Configuration
=================
Pydantic models for every JSON document the toolkit reads. One run = one
RunConfig file; every default is dumped into the run manifest.
"""

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, field_validator


# ============== Enums ==============

class MaterialKind(str, Enum):
    MASS_SPRING = "mass_spring"
    FEM_SHELL = "fem_shell"


class MeshKind(str, Enum):
    SHEET = "sheet"
    BALL = "ball"


class TrajectoryKind(str, Enum):
    PLUS_X = "+X"
    MINUS_X = "-X"
    PLUS_Y = "+Y"
    MINUS_Y = "-Y"
    PLUS_R = "+R"
    MINUS_R = "-R"
    PLUS_Z = "+Z"
    MINUS_Z = "-Z"


# ============== Simulation ==============

class ObstacleConfig(BaseModel):
    """Sphere obstacle handled by a quadratic penetration penalty."""
    center: tuple[float, float, float] = Field(
        default=(0.5, 0.5, -0.6),
        description="Sphere center (m)"
    )
    radius: float = Field(default=0.25, gt=0, description="Sphere radius (m)")
    stiffness: float = Field(default=1e4, ge=0, description="Penalty stiffness k_c")
    margin: float = Field(default=1e-3, ge=0, description="Inflation margin (m)")


class SimConfig(BaseModel):
    """Variational implicit-Euler simulator settings."""
    dt: float = Field(default=1.0 / 60.0, gt=0, description="Timestep (s)")
    total_mass: float = Field(default=0.5, gt=0, description="Cloth mass, lumped uniformly per vertex (kg)")
    gravity: tuple[float, float, float] = Field(
        default=(0.0, 0.0, -9.8),
        description="Gravitational acceleration (m/s^2)"
    )
    material: MaterialKind = Field(default=MaterialKind.MASS_SPRING, description="Stretch/bend discretization")
    stretch_stiffness: float = Field(default=5000.0, ge=0, description="k_s")
    bend_stiffness: float = Field(default=50.0, ge=0, description="k_b (also the 2-ring spring stiffness)")
    stretch_scale: float = Field(default=1.0, ge=0, description="Multiplier on P_s (0.1 for the soft variant)")
    bend_scale: float = Field(default=1.0, ge=0, description="Multiplier on P_b (0.1 for the soft variant)")
    poisson_ratio: float = Field(default=0.3, ge=0, lt=0.5, description="Membrane Poisson ratio (fem_shell)")
    obstacle: Optional[ObstacleConfig] = Field(default=None, description="Optional sphere obstacle")
    newton_tol_scale: float = Field(default=1e-6, gt=0, description="tol_newton = scale * K * mean mass * max(|g|, 1)")
    max_newton: int = Field(default=50, ge=1, description="Newton iteration cap per step")


# ============== Data generation ==============

class SequenceSpec(BaseModel):
    """One simulated sequence (one dataset directory)."""
    name: str = Field(..., description="Dataset name, used as the output sub-directory")
    mesh: MeshKind = Field(default=MeshKind.SHEET)
    resolution: int = Field(default=17, ge=3, description="Sheet grid size n (n x n vertices)")
    sheet_size: float = Field(default=1.0, gt=0, description="Sheet side length (m)")
    holes: bool = Field(default=False, description="Remove a centered vertex block")
    ball_subdivisions: int = Field(default=2, ge=0, description="Icosphere subdivision level")
    ball_radius: float = Field(default=0.2, gt=0, description="Ball radius (m)")
    trajectory: TrajectoryKind = Field(default=TrajectoryKind.PLUS_X)
    amplitude: float = Field(default=0.2, ge=0, description="Meters for translations, radians for rotations")
    period: float = Field(default=2.0, gt=0, description="Seconds per back-and-forth cycle")
    n_frames: int = Field(default=120, ge=2)
    sim: SimConfig = Field(default_factory=SimConfig)


class DatagenConfig(BaseModel):
    sequences: list[SequenceSpec] = Field(
        default_factory=lambda: [SequenceSpec(name="sheet_ms")],
        description="Explicit list of sequences to generate"
    )
    seed: int = Field(default=0)


# ============== Training ==============

class Stage1Weights(BaseModel):
    recon: float = Field(default=1.0, ge=0)
    vert: float = Field(default=1.0, ge=0)
    ephys: float = Field(default=0.5, ge=0)


class Stage2Weights(BaseModel):
    sim: float = Field(default=1.0, ge=0)
    mphys: float = Field(default=0.1, ge=0)


class Stage3Weights(BaseModel):
    recon: float = Field(default=1.0, ge=0)
    vert: float = Field(default=1.0, ge=0)
    ephys: float = Field(default=0.5, ge=0)
    sim: float = Field(default=1.0, ge=0)


class TrainConfig(BaseModel):
    """Autoencoder, latent MLP and optimizer settings for all three stages."""
    latent_dim: int = Field(default=128, ge=1)
    conv_layers: int = Field(default=2, ge=0, description="Graph-conv layers L (9 -> 9 channels each)")
    leaky_slope: float = Field(default=0.1, ge=0)
    mlp_hidden: list[int] = Field(default_factory=lambda: [256, 256, 256])
    stage1: Stage1Weights = Field(default_factory=Stage1Weights)
    stage2: Stage2Weights = Field(default_factory=Stage2Weights)
    stage3: Stage3Weights = Field(default_factory=Stage3Weights)
    blend: float = Field(default=0.5, ge=0, le=1, description="Weight of z_m in the stage-3 decoder input")
    lr: float = Field(default=1e-3, gt=0)
    betas: tuple[float, float] = Field(default=(0.9, 0.999))
    eps: float = Field(default=1e-8, gt=0)
    epochs_stage1: int = Field(default=200, ge=0)
    epochs_stage2: int = Field(default=200, ge=0)
    epochs_stage3: int = Field(default=50, ge=0)
    batch_size: int = Field(default=8, ge=1)
    unroll: int = Field(default=8, ge=3, description="Window length for L_mphys unrolling")
    seed: int = Field(default=0)


class IkConfig(BaseModel):
    max_iter: int = Field(default=500, ge=1)
    step: float = Field(default=1.0, gt=0, description="Initial line-search step")
    grad_tol: float = Field(default=1e-8, ge=0)


class MetricsConfig(BaseModel):
    rms_scale: float = Field(default=1000.0, gt=0, description="m -> mm")
    sted_weight: float = Field(default=0.5, ge=0, description="w in STED = STED_s + w * STED_t")
    sted_radius: int = Field(default=1, ge=1, description="Topological neighbourhood radius")
    sted_time_scale: float = Field(default=1.0, gt=0, description="Virtual time extent in mean edge lengths")


class RunConfig(BaseModel):
    """Everything one CLI invocation may need."""
    datagen: DatagenConfig = Field(default_factory=DatagenConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    ik: IkConfig = Field(default_factory=IkConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)

    @field_validator("datagen")
    @classmethod
    def _unique_names(cls, value: DatagenConfig) -> DatagenConfig:
        names = [s.name for s in value.sequences]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate sequence names: {names}")
        return value

    @classmethod
    def load(cls, path: Optional[Path]) -> "RunConfig":
        if path is None:
            return cls()
        return cls.model_validate_json(Path(path).read_text())


def config_hash(model: BaseModel) -> str:
    """sha256 of the canonical JSON dump."""
    canonical = json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
