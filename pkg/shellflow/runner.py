"""
Shellflow Runner
================
Command-line surface: data generation, three-stage training, evaluation,
latent rollout, cloth IK and the config schema.

    python -m shellflow gen-data --config configs/desk.json --out data/
    python -m shellflow train --stage 1 --dataset data/sheet_ms --out ckpt/s1
    python -m shellflow eval --dataset data/sheet_ms --checkpoint ckpt/s1 --out eval/
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from dotenv import load_dotenv
from pydantic import ValidationError

from .acap import acap_forward
from .config import RunConfig, SimConfig, config_hash
from .datagen import Dataset, generate_sequence
from .embedding import Pipeline, TrainHistory, TrainingData, evaluate_embedding, ik_solve, train_stage1
from .errors import DatasetFormatError, EnvironmentSettingError, ShapeMismatchError, ShellflowError
from .latent_dyn import LatentMLP, evaluate_prediction, finetune_stage3, rollout_latent, train_stage2
from .mesh import save_obj
from .metrics import TEST, TRAIN, evaluate_sequence, split_labels
from .nn_core import Autoencoder
from .shell_sim import SimState, rollout
from .storage import (
    Checkpoint,
    RunManifest,
    git_describe,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
    write_manifest,
    write_table,
)

logger = logging.getLogger("shellflow.cli")

EVAL_COLUMNS = ["dataset", "method", "split", "m_rms", "m_sted", "m_phys"]
TIMING_COLUMNS = ["method", "K", "n_frames", "seconds", "seconds_per_frame", "speedup"]


# ============== Helpers ==============

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={
            "datagen": cfg.datagen.model_copy(update={"seed": args.seed}),
            "train": cfg.train.model_copy(update={"seed": args.seed}),
        })
    return cfg


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)


def _finish(args, cfg: RunConfig, out: Path, inputs: dict, outputs: dict, timings: dict) -> None:
    manifest = RunManifest(
        command=args.command,
        config_hash=config_hash(cfg),
        seed=cfg.train.seed if args.command != "gen-data" else cfg.datagen.seed,
        inputs={k: str(v) for k, v in inputs.items()},
        outputs={k: str(v) for k, v in outputs.items()},
        config=cfg.model_dump(mode="json"),
        timings={k: round(v, 4) for k, v in timings.items()},
        git_describe=git_describe(),
    )
    path = write_manifest(out, manifest)
    logger.info(f"Run manifest written to {path}")


def _check_mesh(checkpoint: Checkpoint, dataset: Dataset) -> None:
    same = (checkpoint.mesh.K == dataset.mesh.K
            and np.array_equal(checkpoint.mesh.triangles, dataset.mesh.triangles)
            and np.array_equal(checkpoint.grasp, dataset.grasp))
    if not same:
        raise ShapeMismatchError(
            f"checkpoint mesh (K={checkpoint.mesh.K}) and dataset '{dataset.name}' (K={dataset.mesh.K}) differ"
        )


def _require(value, flag: str):
    if value is None:
        raise DatasetFormatError(f"{flag} is required for this command")
    return value


# ============== Commands ==============

def cmd_gen_data(args, cfg: RunConfig) -> None:
    out = Path(args.out)
    outputs, timings = {}, {}
    for spec in cfg.datagen.sequences:
        if args.frames is not None:
            spec = spec.model_copy(update={"n_frames": args.frames})
        started = time.perf_counter()
        dataset = generate_sequence(spec, cfg.datagen.seed)
        outputs[spec.name] = save_dataset(dataset, out / spec.name)
        timings[spec.name] = time.perf_counter() - started
    _finish(args, cfg, out, {"config": args.config}, outputs, timings)


def cmd_train(args, cfg: RunConfig) -> None:
    dataset = load_dataset(_require(args.dataset, "--dataset"))
    out = Path(args.out)
    train_cfg = cfg.train
    _seed_everything(train_cfg.seed)
    pipeline = Pipeline.build(dataset.mesh, dataset.sim, dataset.grasp)
    data = TrainingData.from_dataset(dataset, pipeline.ref)

    started = time.perf_counter()
    if args.stage == 1:
        ae = Autoencoder(pipeline.ref.adjacency, train_cfg.latent_dim, train_cfg.conv_layers,
                         train_cfg.leaky_slope, train_cfg.seed)
        history = train_stage1(data, ae, pipeline, train_cfg)
        checkpoint = Checkpoint(mesh=dataset.mesh, sim=dataset.sim, grasp=dataset.grasp, train=train_cfg,
                                autoencoder=ae, stage=1)
    else:
        checkpoint = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
        _check_mesh(checkpoint, dataset)
        if args.stage == 2:
            mlp = LatentMLP(checkpoint.autoencoder.latent_dim, dataset.grasp.size, train_cfg.mlp_hidden,
                            train_cfg.leaky_slope, train_cfg.seed)
            history = train_stage2(data, checkpoint.autoencoder, mlp, pipeline, train_cfg)
            checkpoint.mlp = mlp
        else:
            if checkpoint.mlp is None:
                raise DatasetFormatError(f"{args.checkpoint}: stage 3 needs a checkpoint with a latent MLP")
            history = finetune_stage3(data, checkpoint.autoencoder, checkpoint.mlp, pipeline, train_cfg)
        checkpoint.stage = args.stage
        checkpoint.train = train_cfg
    elapsed = time.perf_counter() - started

    checkpoint.info = {**checkpoint.info, f"stage{args.stage}_dataset": dataset.name}
    save_checkpoint(checkpoint, out, config_hash(cfg))
    history_path = write_table(out / f"history_stage{args.stage}.csv", history.rows,
                               list(TrainHistory().to_frame().columns))
    _finish(args, cfg, out, {"dataset": args.dataset, "checkpoint": args.checkpoint},
            {"checkpoint": out, "history": history_path}, {f"stage{args.stage}": elapsed})


def cmd_eval(args, cfg: RunConfig) -> None:
    dataset = load_dataset(_require(args.dataset, "--dataset"))
    out = Path(args.out)
    pipeline = Pipeline.build(dataset.mesh, dataset.sim, dataset.grasp)
    results = {"ground_truth": evaluate_sequence(pipeline.model, dataset.frames, dataset.frames,
                                                 dataset.trajectory, dataset.split, cfg.metrics)}
    timings = {}

    if args.checkpoint is not None:
        checkpoint = load_checkpoint(args.checkpoint)
        _check_mesh(checkpoint, dataset)
        data = TrainingData.from_dataset(dataset, pipeline.ref)
        started = time.perf_counter()
        results["embedding"] = evaluate_embedding(checkpoint.autoencoder, data, pipeline, cfg.metrics)
        timings["embedding"] = time.perf_counter() - started
        if checkpoint.mlp is not None:
            started = time.perf_counter()
            results["prediction"] = evaluate_prediction(checkpoint.autoencoder, checkpoint.mlp, pipeline, data,
                                                        cfg.metrics)
            timings["prediction"] = time.perf_counter() - started

    rows = []
    for method, per_split in results.items():
        for split in (TRAIN, TEST):
            if split in per_split:
                rows.append({"dataset": dataset.name, "method": method, "split": split, **per_split[split]})
                logger.info(f"[{method}] [{split.upper()}] " + " ".join(
                    f"{k}={per_split[split][k]:.6g}" for k in ("m_rms", "m_sted", "m_phys")))
    table = write_table(out / "metrics.csv", rows, EVAL_COLUMNS)
    _finish(args, cfg, out, {"dataset": args.dataset, "checkpoint": args.checkpoint}, {"metrics": table}, timings)


def cmd_rollout(args, cfg: RunConfig) -> None:
    dataset = load_dataset(_require(args.dataset, "--dataset"))
    checkpoint = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    _check_mesh(checkpoint, dataset)
    if checkpoint.mlp is None:
        raise DatasetFormatError(f"{args.checkpoint}: rollout needs a checkpoint with a latent MLP")
    n_frames = dataset.n_frames if args.frames is None else args.frames
    if not 2 <= n_frames <= dataset.n_frames:
        raise ShapeMismatchError(f"--frames must lie in [2, {dataset.n_frames}], got {n_frames}")
    out = Path(args.out)

    pipeline = Pipeline.build(dataset.mesh, dataset.sim, dataset.grasp)
    q = dataset.trajectory[:n_frames]
    seeds = np.stack([acap_forward(pipeline.ref, dataset.frames[0]), acap_forward(pipeline.ref, dataset.frames[1])])
    with torch.no_grad():
        z = checkpoint.autoencoder.encode(torch.as_tensor(seeds))
    learned = rollout_latent(checkpoint.mlp, checkpoint.autoencoder, pipeline, z[0], z[1], q)

    timing_rows = [{"method": "learned", "K": dataset.mesh.K, "n_frames": learned.n_frames,
                    "seconds": learned.seconds,
                    "seconds_per_frame": learned.seconds / max(learned.n_frames, 1), "speedup": 1.0}]
    if not args.no_sim:
        started = time.perf_counter()
        rollout(pipeline.model, SimState(dataset.frames[0], dataset.frames[1]), q[2:], n_frames - 2)
        sim_seconds = time.perf_counter() - started
        timing_rows.append({"method": "simulator", "K": dataset.mesh.K, "n_frames": n_frames - 2,
                            "seconds": sim_seconds, "seconds_per_frame": sim_seconds / max(n_frames - 2, 1),
                            "speedup": 1.0})
        if learned.seconds > 0:
            timing_rows[0]["speedup"] = sim_seconds / learned.seconds
        logger.info(f"Learned {learned.seconds:.3f}s vs simulator {sim_seconds:.3f}s "
                    f"(x{timing_rows[0]['speedup']:.1f})")

    frames = np.concatenate([dataset.frames[:2], learned.frames], axis=0)
    predicted = Dataset(
        mesh=dataset.mesh, frames=frames, grasp=dataset.grasp, trajectory=q.copy(), sim=dataset.sim,
        split=split_labels(n_frames),
        provenance={"name": f"{dataset.name}_predicted", "source": str(args.dataset),
                    "checkpoint": str(args.checkpoint), "seeded_from_frames": [0, 1]},
    )
    dataset_dir = save_dataset(predicted, out / "prediction")
    table = write_table(out / "timing.csv", timing_rows, TIMING_COLUMNS)
    _finish(args, cfg, out, {"dataset": args.dataset, "checkpoint": args.checkpoint},
            {"prediction": dataset_dir, "timing": table}, {"learned": learned.seconds})


def _read_targets(path: Path, n_grasp: int) -> np.ndarray:
    with open(path, "r") as f:
        payload = json.load(f)
    if isinstance(payload, dict):
        payload = payload.get("targets")
    targets = np.asarray(payload, dtype=np.float64)
    if targets.shape != (n_grasp, 3):
        raise ShapeMismatchError(f"{path}: expected {n_grasp} grasp targets of 3 coordinates, got {targets.shape}")
    return targets


def cmd_ik(args, cfg: RunConfig) -> None:
    checkpoint = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    targets = _read_targets(Path(_require(args.targets, "--targets")), checkpoint.grasp.size)
    out = Path(args.out)
    pipeline = Pipeline.build(checkpoint.mesh, checkpoint.sim, checkpoint.grasp)
    with torch.no_grad():
        z0 = checkpoint.autoencoder.encode(torch.as_tensor(acap_forward(pipeline.ref, checkpoint.mesh.vertices)))

    started = time.perf_counter()
    result = ik_solve(checkpoint.autoencoder, pipeline, targets, z0.numpy(), cfg.ik)
    elapsed = time.perf_counter() - started
    logger.info(f"IK finished after {result.iterations} iterations, objective {result.objective[-1]:.6e}")

    out.mkdir(parents=True, exist_ok=True)
    mesh_path = out / "ik.obj"
    save_obj(checkpoint.mesh, mesh_path, result.positions)
    with open(out / "ik.json", "w") as f:
        json.dump({"iterations": result.iterations, "converged": result.converged, "status": result.status,
                   "grad_norm": result.grad_norm, "objective": result.objective}, f, indent=2)
    _finish(args, cfg, out, {"checkpoint": args.checkpoint, "targets": args.targets},
            {"mesh": mesh_path, "report": out / "ik.json"}, {"ik": elapsed})


def cmd_schema(args, cfg: RunConfig) -> None:
    schema = RunConfig.model_json_schema() if args.full else SimConfig.model_json_schema()
    print(json.dumps(schema, indent=2))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "ik": cmd_ik,
    "schema": cmd_schema,
}


# ============== CLI Entry Point ==============

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shellflow", description="Physics-guided cloth embedding and latent simulation")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_required: bool = True):
        p.add_argument("--config", type=Path, help="RunConfig JSON file (defaults when omitted)")
        p.add_argument("--seed", type=int, help="Override the config seed")
        p.add_argument("--out", type=Path, required=out_required, help="Output directory")

    p = sub.add_parser("gen-data", help="Simulate the configured sequences")
    common(p)
    p.add_argument("--frames", type=int, help="Override n_frames of every sequence")

    p = sub.add_parser("train", help="Run one training stage")
    common(p)
    p.add_argument("--stage", type=int, choices=[1, 2, 3], required=True)
    p.add_argument("--dataset", type=Path, help="Dataset directory")
    p.add_argument("--checkpoint", type=Path, help="Input checkpoint (stages 2 and 3)")

    p = sub.add_parser("eval", help="Metrics table for ground truth, embedding and prediction")
    common(p)
    p.add_argument("--dataset", type=Path, help="Dataset directory")
    p.add_argument("--checkpoint", type=Path, help="Checkpoint directory")

    p = sub.add_parser("rollout", help="Latent rollout and timing against the simulator")
    common(p)
    p.add_argument("--dataset", type=Path, help="Dataset providing the two seed frames and the grasp trajectory")
    p.add_argument("--checkpoint", type=Path, help="Checkpoint with a latent MLP")
    p.add_argument("--frames", type=int, help="Total frames N, seeds included")
    p.add_argument("--no-sim", action="store_true", help="Skip the reference simulation timing")

    p = sub.add_parser("ik", help="Cloth shape for given grasp targets")
    common(p)
    p.add_argument("--checkpoint", type=Path, help="Checkpoint directory")
    p.add_argument("--targets", type=Path, help="JSON list (or {'targets': [...]}) of grasp positions")

    p = sub.add_parser("schema", help="Print the simulation config JSON schema")
    common(p, out_required=False)
    p.add_argument("--full", action="store_true", help="Print the whole RunConfig schema")
    return parser


def _apply_threads(value: Optional[str]) -> None:
    if not value:
        return
    try:
        threads = int(value)
    except ValueError:
        threads = 0
    if threads < 1:
        raise EnvironmentSettingError(f"SHELLFLOW_THREADS must be a positive integer, got {value!r}")
    torch.set_num_threads(threads)


def main(argv: Optional[list[str]] = None) -> int:
    """Command-line interface; returns the process exit code."""
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format='%(asctime)s | %(levelname)s | %(name)s | %(message)s',
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )
    try:
        _apply_threads(os.environ.get("SHELLFLOW_THREADS"))
        cfg = _load_config(args)
        logger.info(f"[{args.command}] config {config_hash(cfg)[:12]}")
        COMMANDS[args.command](args, cfg)
    except ShellflowError as exc:
        logger.error(f"[{args.command}] {exc}")
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return 1
    except (ValidationError, OSError, json.JSONDecodeError) as exc:
        logger.error(f"[{args.command}] {exc}")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
