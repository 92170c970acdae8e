import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from shellflow.config import MetricsConfig
from shellflow.errors import ShapeMismatchError
from shellflow.mesh import build_adjacency
from shellflow.metrics import (
    TEST,
    TRAIN,
    evaluate_sequence,
    m_phys,
    m_phys_sequence,
    m_rms,
    m_sted,
    split_blocks,
    split_labels,
    sted_spatial,
    sted_temporal,
)


@pytest.fixture(scope="module")
def edges(sheet5):
    mesh, _ = sheet5
    return build_adjacency(mesh).edges


def _noisy(frames, rng, scale=0.01):
    return frames + scale * rng.standard_normal(frames.shape)


def _sted_spatial_loops(reference, candidate, edges):
    values = []
    for ref, cand in zip(reference, candidate):
        for v in range(ref.shape[0]):
            incident = [(i, j) for i, j in edges if v in (i, j)]
            if not incident:
                continue
            w = np.array([np.linalg.norm(ref[i] - ref[j]) for i, j in incident])
            d = np.array([(np.linalg.norm(cand[i] - cand[j]) - np.linalg.norm(ref[i] - ref[j]))
                          / np.linalg.norm(ref[i] - ref[j]) for i, j in incident])
            mean = (w * d).sum() / w.sum()
            values.append(np.sqrt((w * (d - mean) ** 2).sum() / w.sum()))
    return float(np.mean(values))


def _sted_temporal_loops(reference, candidate, edges, time_scale):
    tau = time_scale * np.mean([np.linalg.norm(f[i] - f[j]) for f in reference for i, j in edges])
    errors = []
    for m in range(len(reference) - 1):
        for v in range(reference.shape[1]):
            ref_len = np.sqrt(np.sum((reference[m + 1, v] - reference[m, v]) ** 2) + tau ** 2)
            cand_len = np.sqrt(np.sum((candidate[m + 1, v] - candidate[m, v]) ** 2) + tau ** 2)
            errors.append(((cand_len - ref_len) / ref_len) ** 2)
    return float(np.sqrt(np.mean(errors)))


def test_identical_sequences_score_zero(dataset5, edges):
    frames = dataset5.frames
    assert m_rms(frames, frames) == 0.0
    assert sted_spatial(frames, frames, edges) == 0.0
    assert sted_temporal(frames, frames, edges) == 0.0
    assert m_sted(frames, frames, edges) == 0.0


def test_translation(dataset5, edges):
    t = np.array([0.003, -0.004, 0.0])
    moved = dataset5.frames + t
    assert m_rms(dataset5.frames, moved) == pytest.approx(5.0)
    assert m_rms(dataset5.frames, moved, scale=1.0) == pytest.approx(0.005)
    assert sted_spatial(dataset5.frames, moved, edges) == pytest.approx(0.0, abs=1e-12)
    assert sted_temporal(dataset5.frames, moved, edges) == pytest.approx(0.0, abs=1e-12)


def test_uniform_scaling_has_no_spatial_distortion(dataset5, edges):
    assert sted_spatial(dataset5.frames, 1.3 * dataset5.frames, edges) == pytest.approx(0.0, abs=1e-12)


def test_m_rms_is_invariant_to_shared_rigid_motion(dataset5, rng):
    reference = dataset5.frames[4:9]
    candidate = _noisy(reference, rng)
    rotation = Rotation.from_rotvec([0.4, -1.1, 0.7]).as_matrix()
    shift = np.array([0.2, -0.5, 1.3])
    moved_reference = reference @ rotation.T + shift
    moved_candidate = candidate @ rotation.T + shift
    assert m_rms(moved_reference, moved_candidate) == pytest.approx(m_rms(reference, candidate), rel=1e-10)


def test_sted_matches_loop_reference(dataset5, edges, rng):
    reference = dataset5.frames[5:10]
    candidate = _noisy(reference, rng)
    assert sted_spatial(reference, candidate, edges) == pytest.approx(
        _sted_spatial_loops(reference, candidate, edges), rel=1e-10)
    for time_scale in (1.0, 0.25):
        assert sted_temporal(reference, candidate, edges, time_scale) == pytest.approx(
            _sted_temporal_loops(reference, candidate, edges, time_scale), rel=1e-10)
    expected = sted_spatial(reference, candidate, edges) + 0.3 * sted_temporal(reference, candidate, edges)
    assert m_sted(reference, candidate, edges, weight=0.3) == pytest.approx(expected)


def test_shape_checks(dataset5, edges):
    with pytest.raises(ShapeMismatchError):
        m_rms(dataset5.frames, dataset5.frames[:-1])
    with pytest.raises(ShapeMismatchError):
        sted_temporal(dataset5.frames[:1], dataset5.frames[:1], edges)
    assert m_rms(dataset5.frames[:0], dataset5.frames[:0]) == 0.0


def test_split_labels():
    labels = split_labels(40)
    assert list(labels[:12]) == [TRAIN] * 12
    assert list(labels[12:17]) == [TEST] * 5
    assert list(labels[17:29]) == [TRAIN] * 12
    assert list(labels[34:]) == [TRAIN] * 6


def test_split_blocks():
    blocks = split_blocks(split_labels(40), TEST)
    assert [b.tolist() for b in blocks] == [list(range(12, 17)), list(range(29, 34))]
    assert split_blocks(split_labels(10), TEST) == []


def test_ground_truth_satisfies_optimality(dataset5, model5):
    tol = model5.tol_newton
    for m in range(2, dataset5.n_frames):
        f = dataset5.frames
        assert m_phys(model5, f[m - 2], f[m - 1], f[m], dataset5.trajectory[m]) < tol ** 2
    mean = m_phys_sequence(model5, dataset5.frames, dataset5.trajectory, range(dataset5.n_frames))
    assert mean < tol ** 2
    assert np.isnan(m_phys_sequence(model5, dataset5.frames, dataset5.trajectory, [0, 1]))


def test_m_phys_detects_perturbation(dataset5, model5, rng):
    f = dataset5.frames
    clean = m_phys(model5, f[8], f[9], f[10], dataset5.trajectory[10])
    noisy = m_phys(model5, f[8], f[9], _noisy(f[10], rng), dataset5.trajectory[10])
    assert noisy > 1e3 * clean


def test_evaluate_sequence_on_ground_truth(dataset5, model5):
    results = evaluate_sequence(model5, dataset5.frames, dataset5.frames, dataset5.trajectory, dataset5.split)
    assert set(results) == {TRAIN, TEST}
    tol = model5.tol_newton
    for split in (TRAIN, TEST):
        assert results[split]["m_rms"] == 0.0
        assert results[split]["m_sted"] == 0.0
        assert results[split]["m_phys"] < tol ** 2


def test_evaluate_sequence_restricted_indices(dataset5, model5, rng):
    candidate = dataset5.frames.copy()
    candidate[15] = _noisy(candidate[15], rng)
    results = evaluate_sequence(model5, dataset5.frames, candidate, dataset5.trajectory, dataset5.split,
                                MetricsConfig(), indices=np.arange(2, dataset5.n_frames))
    assert results[TRAIN]["m_rms"] == 0.0
    assert results[TEST]["m_rms"] > 0.0
    assert results[TEST]["m_sted"] > 0.0
