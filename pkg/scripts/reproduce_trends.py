"""
Directional Trend Check
=======================
Desk-scale experiments for the physics-loss claims and the rollout speedup:

1. stage 1 with lambda_ephys = 0.5 vs 0: test M_phys must not rise, M_rms
   may worsen by at most 10%
2. stage 2 with lambda_mphys > 0 vs 0: 3-frame test M_phys must not rise;
   stage 3 may worsen no metric by more than 5%
3. latent rollout at least 50x faster than the simulator over >= 100 frames

Prints a report and exits 1 when a claim fails.

    python scripts/reproduce_trends.py --config configs/desk.json --epochs-scale 0.25
"""

import argparse
import copy
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from shellflow.acap import acap_forward  # noqa: E402
from shellflow.config import RunConfig, Stage1Weights, Stage2Weights  # noqa: E402
from shellflow.datagen import generate_sequence  # noqa: E402
from shellflow.embedding import Pipeline, TrainingData, evaluate_embedding, train_stage1  # noqa: E402
from shellflow.latent_dyn import LatentMLP, evaluate_prediction, finetune_stage3, rollout_latent, train_stage2  # noqa: E402
from shellflow.metrics import TEST  # noqa: E402
from shellflow.nn_core import Autoencoder  # noqa: E402
from shellflow.shell_sim import SimState, rollout  # noqa: E402

logger = logging.getLogger("shellflow.trends")

SPEEDUP_MIN = 50.0
RMS_SLACK = 1.10
STAGE3_SLACK = 1.05


def _scaled(epochs: int, scale: float) -> int:
    return max(1, int(round(epochs * scale)))


def check(report: list, name: str, passed: bool, detail: str) -> bool:
    report.append((name, passed, detail))
    logger.info(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return passed


def main() -> int:
    parser = argparse.ArgumentParser(description="Directional physics-loss and speedup checks")
    parser.add_argument("--config", type=Path, help="RunConfig JSON (first sequence is used)")
    parser.add_argument("--epochs-scale", type=float, default=1.0, help="Multiplier on every stage's epochs")
    parser.add_argument("--frames", type=int, help="Override the sequence length")
    args = parser.parse_args()

    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s | %(levelname)s | %(name)s | %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
    )

    cfg = RunConfig.load(args.config)
    spec = cfg.datagen.sequences[0]
    if args.frames is not None:
        spec = spec.model_copy(update={"n_frames": args.frames})
    train_cfg = cfg.train.model_copy(update={
        "epochs_stage1": _scaled(cfg.train.epochs_stage1, args.epochs_scale),
        "epochs_stage2": _scaled(cfg.train.epochs_stage2, args.epochs_scale),
        "epochs_stage3": _scaled(cfg.train.epochs_stage3, args.epochs_scale),
    })

    dataset = generate_sequence(spec, cfg.datagen.seed)
    pipeline = Pipeline.build(dataset.mesh, dataset.sim, dataset.grasp)
    data = TrainingData.from_dataset(dataset, pipeline.ref)
    report = []

    # ============== Stage 1: physics loss on the embedding ==============

    def stage1(ephys: float) -> Autoencoder:
        torch.manual_seed(train_cfg.seed)
        ae = Autoencoder(pipeline.ref.adjacency, train_cfg.latent_dim, train_cfg.conv_layers,
                         train_cfg.leaky_slope, train_cfg.seed)
        weights = Stage1Weights(recon=train_cfg.stage1.recon, vert=train_cfg.stage1.vert, ephys=ephys)
        train_stage1(data, ae, pipeline, train_cfg, weights)
        return ae

    baseline_ae = stage1(0.0)
    physics_ae = stage1(train_cfg.stage1.ephys if train_cfg.stage1.ephys > 0 else 0.5)
    base = evaluate_embedding(baseline_ae, data, pipeline, cfg.metrics)[TEST]
    phys = evaluate_embedding(physics_ae, data, pipeline, cfg.metrics)[TEST]
    check(report, "embedding M_phys", phys["m_phys"] <= base["m_phys"],
          f"{phys['m_phys']:.4e} (with PB-loss) vs {base['m_phys']:.4e} (baseline)")
    check(report, "embedding M_rms", phys["m_rms"] <= RMS_SLACK * base["m_rms"],
          f"{phys['m_rms']:.4f} mm vs {base['m_rms']:.4f} mm (limit x{RMS_SLACK})")

    # ============== Stage 2 / 3: physics loss on the latent simulator ==============

    def stage2(mphys: float) -> LatentMLP:
        torch.manual_seed(train_cfg.seed)
        mlp = LatentMLP(physics_ae.latent_dim, dataset.grasp.size, train_cfg.mlp_hidden,
                        train_cfg.leaky_slope, train_cfg.seed)
        train_stage2(data, physics_ae, mlp, pipeline, train_cfg, Stage2Weights(sim=train_cfg.stage2.sim, mphys=mphys))
        return mlp

    baseline_mlp = stage2(0.0)
    physics_mlp = stage2(train_cfg.stage2.mphys if train_cfg.stage2.mphys > 0 else 0.1)
    base = evaluate_prediction(physics_ae, baseline_mlp, pipeline, data, cfg.metrics)[TEST]
    second = evaluate_prediction(physics_ae, physics_mlp, pipeline, data, cfg.metrics)[TEST]
    check(report, "prediction M_phys", second["m_phys"] <= base["m_phys"],
          f"{second['m_phys']:.4e} (2nd stage) vs {base['m_phys']:.4e} (baseline)")

    tuned_ae, tuned_mlp = copy.deepcopy(physics_ae), copy.deepcopy(physics_mlp)
    finetune_stage3(data, tuned_ae, tuned_mlp, pipeline, train_cfg)
    third = evaluate_prediction(tuned_ae, tuned_mlp, pipeline, data, cfg.metrics)[TEST]
    for key in ("m_rms", "m_sted", "m_phys"):
        check(report, f"3rd stage {key}", third[key] <= STAGE3_SLACK * second[key],
              f"{third[key]:.4e} vs {second[key]:.4e} (limit x{STAGE3_SLACK})")

    # ============== Speedup ==============

    n = dataset.n_frames
    q = dataset.trajectory
    seeds = np.stack([acap_forward(pipeline.ref, dataset.frames[0]), acap_forward(pipeline.ref, dataset.frames[1])])
    with torch.no_grad():
        z = tuned_ae.encode(torch.as_tensor(seeds))
    learned = rollout_latent(tuned_mlp, tuned_ae, pipeline, z[0], z[1], q)
    started = time.perf_counter()
    rollout(pipeline.model, SimState(dataset.frames[0], dataset.frames[1]), q[2:], n - 2)
    sim_seconds = time.perf_counter() - started
    ratio = sim_seconds / max(learned.seconds, 1e-12)
    check(report, "rollout speedup", ratio >= SPEEDUP_MIN and n - 2 >= 100,
          f"x{ratio:.1f} over {n - 2} frames ({learned.seconds:.3f}s vs {sim_seconds:.3f}s)")

    print("\n" + "=" * 60)
    for name, passed, detail in report:
        print(f"{'PASS' if passed else 'FAIL':4}  {name:24} {detail}")
    print("=" * 60)
    return 0 if all(passed for _, passed, _ in report) else 1


if __name__ == "__main__":
    sys.exit(main())
