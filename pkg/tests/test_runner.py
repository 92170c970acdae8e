import json

import numpy as np
import pandas as pd
import pytest

from shellflow.config import DatagenConfig, IkConfig, RunConfig, SequenceSpec, TrainConfig
from shellflow.runner import EVAL_COLUMNS, TIMING_COLUMNS, build_parser, main
from shellflow.storage import load_checkpoint, load_dataset


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny config plus a generated dataset shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = RunConfig(
        datagen=DatagenConfig(sequences=[SequenceSpec(name="tiny", resolution=4, n_frames=20,
                                                      amplitude=0.05, period=0.5)]),
        train=TrainConfig(latent_dim=4, conv_layers=1, mlp_hidden=[8], batch_size=4, unroll=4,
                          epochs_stage1=1, epochs_stage2=1, epochs_stage3=1),
        ik=IkConfig(max_iter=3),
    )
    config = root / "tiny.json"
    config.write_text(cfg.model_dump_json(indent=2))
    assert main(["gen-data", "--config", str(config), "--out", str(root / "data")]) == 0
    return root, config


def _run(*argv) -> int:
    return main([str(a) for a in argv])


def test_schema_prints_sim_config(capsys):
    assert main(["--log-level", "WARNING", "schema"]) == 0
    out = capsys.readouterr().out
    schema = json.loads(out[out.index("{"):])
    assert "stretch_stiffness" in schema["properties"]

    assert main(["--log-level", "WARNING", "schema", "--full"]) == 0
    out = capsys.readouterr().out
    schema = json.loads(out[out.index("{"):])
    assert {"datagen", "train", "ik", "metrics"} <= set(schema["properties"])


def test_bad_arguments_exit_with_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["train", "--out", "x"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 2


def test_parser_defaults():
    args = build_parser().parse_args(["rollout", "--out", "o", "--frames", "5", "--no-sim"])
    assert args.frames == 5
    assert args.no_sim
    assert args.config is None
    assert args.log_level == "INFO"


def test_gen_data_is_reproducible(workspace, tmp_path):
    root, config = workspace
    assert _run("gen-data", "--config", config, "--out", tmp_path / "again") == 0
    for name in ("frames.bin", "grasp.bin", "rest.bin", "mesh.obj", "manifest.json"):
        assert (root / "data" / "tiny" / name).read_bytes() == (tmp_path / "again" / "tiny" / name).read_bytes()
    manifest = json.loads((tmp_path / "again" / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data"
    assert set(manifest["outputs"]) == {"tiny"}


def test_gen_data_frame_override(workspace, tmp_path):
    _, config = workspace
    assert _run("gen-data", "--config", config, "--frames", "5", "--out", tmp_path) == 0
    assert load_dataset(tmp_path / "tiny").n_frames == 5


def test_eval_ground_truth_only(workspace, tmp_path):
    root, config = workspace
    assert _run("eval", "--config", config, "--dataset", root / "data" / "tiny", "--out", tmp_path) == 0
    table = pd.read_csv(tmp_path / "metrics.csv")
    assert list(table.columns) == EVAL_COLUMNS
    assert set(table["method"]) == {"ground_truth"}
    assert (table["m_rms"] == 0.0).all()
    assert (tmp_path / "run_manifest.json").exists()


def test_missing_dataset_reports_json_error(tmp_path, capsys):
    assert _run("eval", "--dataset", tmp_path / "missing", "--out", tmp_path / "out") == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "DatasetFormatError"


def test_invalid_config_reports_json_error(tmp_path, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"train": {"latent_dim": 0}}))
    assert _run("eval", "--config", config, "--dataset", tmp_path, "--out", tmp_path / "out") == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "ValidationError"


@pytest.mark.parametrize("value", ["abc", "0", "-2"])
def test_bad_thread_count_reports_json_error(value, monkeypatch, capsys):
    monkeypatch.setenv("SHELLFLOW_THREADS", value)
    assert main(["--log-level", "WARNING", "schema"]) == 1
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "EnvironmentSettingError"


def test_training_chain(workspace, tmp_path):
    root, config = workspace
    data = root / "data" / "tiny"
    s1, s2, s3 = tmp_path / "s1", tmp_path / "s2", tmp_path / "s3"

    assert _run("train", "--stage", 1, "--config", config, "--dataset", data, "--out", s1) == 0
    assert load_checkpoint(s1).mlp is None
    history = pd.read_csv(s1 / "history_stage1.csv")
    assert set(history["stage"]) == {1}

    assert _run("train", "--stage", 3, "--config", config, "--dataset", data, "--checkpoint", s1, "--out", s3) == 1

    assert _run("train", "--stage", 2, "--config", config, "--dataset", data, "--checkpoint", s1, "--out", s2) == 0
    checkpoint = load_checkpoint(s2)
    assert checkpoint.stage == 2
    assert checkpoint.mlp is not None

    assert _run("train", "--stage", 3, "--config", config, "--dataset", data, "--checkpoint", s2, "--out", s3) == 0
    assert load_checkpoint(s3).stage == 3

    ev = tmp_path / "eval"
    assert _run("eval", "--config", config, "--dataset", data, "--checkpoint", s3, "--out", ev) == 0
    table = pd.read_csv(ev / "metrics.csv")
    assert set(table["method"]) == {"ground_truth", "embedding", "prediction"}
    assert set(table["split"]) == {"train", "test"}

    ro = tmp_path / "rollout"
    assert _run("rollout", "--config", config, "--dataset", data, "--checkpoint", s2, "--frames", 8,
                "--out", ro) == 0
    predicted = load_dataset(ro / "prediction")
    assert predicted.n_frames == 8
    np.testing.assert_array_equal(predicted.frames[:2], load_dataset(data).frames[:2])
    timing = pd.read_csv(ro / "timing.csv")
    assert list(timing.columns) == TIMING_COLUMNS
    assert list(timing["method"]) == ["learned", "simulator"]

    empty = tmp_path / "empty"
    assert _run("rollout", "--dataset", data, "--checkpoint", s2, "--frames", 2, "--no-sim", "--out", empty) == 0
    assert load_dataset(empty / "prediction").n_frames == 2
    assert (empty / "run_manifest.json").exists()

    targets = tmp_path / "targets.json"
    grasp = load_dataset(data).trajectory[10]
    targets.write_text(json.dumps({"targets": grasp.tolist()}))
    ik = tmp_path / "ik"
    assert _run("ik", "--config", config, "--checkpoint", s1, "--targets", targets, "--out", ik) == 0
    report = json.loads((ik / "ik.json").read_text())
    assert report["iterations"] <= 3
    assert report["status"] in {"converged", "line_search_failed", "max_iter"}
    assert (ik / "ik.obj").exists()


def test_rollout_rejects_mesh_mismatch(workspace, tmp_path):
    root, config = workspace
    other = RunConfig.model_validate_json(config.read_text())
    other.datagen.sequences[0].resolution = 5
    other_config = tmp_path / "other.json"
    other_config.write_text(other.model_dump_json())
    assert _run("gen-data", "--config", other_config, "--frames", 6, "--out", tmp_path / "data") == 0
    assert _run("train", "--stage", 1, "--config", config, "--dataset", root / "data" / "tiny",
                "--out", tmp_path / "s1") == 0
    assert _run("eval", "--dataset", tmp_path / "data" / "tiny", "--checkpoint", tmp_path / "s1",
                "--out", tmp_path / "eval") == 1
