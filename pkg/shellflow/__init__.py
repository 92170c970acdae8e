# Shellflow: physics-guided cloth embedding and latent simulation
from .config import (
    MaterialKind,
    MeshKind,
    TrajectoryKind,
    ObstacleConfig,
    SimConfig,
    SequenceSpec,
    DatagenConfig,
    TrainConfig,
    IkConfig,
    MetricsConfig,
    RunConfig,
    config_hash,
)

from .mesh import TriMesh, Adjacency, build_adjacency, cotan_weights, load_obj, save_obj

from .shell_sim import (
    ShellModel,
    SimState,
    build_model,
    potential_energy,
    potential_gradient,
    physics_loss,
    physics_gradient,
    step,
    rollout,
)

from .acap import ReferenceFrame, PoissonSolver, acap_forward, acap_inverse, acap_inverse_gradient

from .nn_core import Autoencoder, GraphConv

from .embedding import Pipeline, TrainingData, TrainHistory, train_stage1, ik_solve, evaluate_embedding

from .latent_dyn import LatentMLP, train_stage2, finetune_stage3, rollout_latent, evaluate_prediction

from .metrics import m_rms, m_sted, m_phys, evaluate_sequence

from .datagen import Dataset, make_sheet, make_ball, generate_sequence

from .storage import save_dataset, load_dataset, save_checkpoint, load_checkpoint

__all__ = [
    # Config
    "MaterialKind",
    "MeshKind",
    "TrajectoryKind",
    "ObstacleConfig",
    "SimConfig",
    "SequenceSpec",
    "DatagenConfig",
    "TrainConfig",
    "IkConfig",
    "MetricsConfig",
    "RunConfig",
    "config_hash",
    # Mesh
    "TriMesh",
    "Adjacency",
    "build_adjacency",
    "cotan_weights",
    "load_obj",
    "save_obj",
    # Simulator
    "ShellModel",
    "SimState",
    "build_model",
    "potential_energy",
    "potential_gradient",
    "physics_loss",
    "physics_gradient",
    "step",
    "rollout",
    # ACAP
    "ReferenceFrame",
    "PoissonSolver",
    "acap_forward",
    "acap_inverse",
    "acap_inverse_gradient",
    # Networks and training
    "Autoencoder",
    "GraphConv",
    "Pipeline",
    "TrainingData",
    "TrainHistory",
    "train_stage1",
    "ik_solve",
    "evaluate_embedding",
    "LatentMLP",
    "train_stage2",
    "finetune_stage3",
    "rollout_latent",
    "evaluate_prediction",
    # Metrics
    "m_rms",
    "m_sted",
    "m_phys",
    "evaluate_sequence",
    # Data
    "Dataset",
    "make_sheet",
    "make_ball",
    "generate_sequence",
    "save_dataset",
    "load_dataset",
    "save_checkpoint",
    "load_checkpoint",
]
