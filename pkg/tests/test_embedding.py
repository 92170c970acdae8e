import numpy as np
import pytest
import torch

from shellflow import embedding
from shellflow.config import IkConfig, Stage1Weights, TrainConfig
from shellflow.embedding import (
    IK_LINE_SEARCH_FAILED,
    Pipeline,
    TrainingData,
    evaluate_embedding,
    ik_objective,
    ik_solve,
    loss_ephys,
    loss_ephys_latent,
    loss_recon,
    loss_vert,
    physics_terms,
    stage1_loss,
    train_stage1,
)
from shellflow.errors import DivergenceError
from shellflow.metrics import TEST, TRAIN
from shellflow.nn_core import Autoencoder

SMALL = TrainConfig(latent_dim=8, conv_layers=2, batch_size=8, epochs_stage1=3, seed=0)


@pytest.fixture(scope="module")
def pipeline(dataset5):
    return Pipeline.build(dataset5.mesh, dataset5.sim, dataset5.grasp)


@pytest.fixture(scope="module")
def data(dataset5, pipeline):
    return TrainingData.from_dataset(dataset5, pipeline.ref)


@pytest.fixture
def ae(pipeline, data):
    model = Autoencoder(pipeline.ref.adjacency, latent_dim=8, conv_layers=2, seed=0)
    model.set_feature_scaling(data.features.numpy())
    return model


def test_training_data_shapes(data, dataset5):
    assert data.features.shape == (20, 25, 9)
    assert data.frames.shape == (20, 25, 3)
    assert data.q.shape == (20, 2, 3)


def test_loss_recon_matches_direct_computation(ae, data):
    feats = data.features[:4]
    expected = sum(((ae(f) - f) ** 2).sum() for f in feats) / 4
    assert loss_recon(ae, feats).item() == pytest.approx(expected.item(), rel=1e-12)


def test_loss_vert_is_zero_for_exact_features(pipeline, data):
    class Identity(torch.nn.Module):
        def forward(self, f):
            return f

    value = loss_vert(Identity(), data.features, data.frames, data.q, pipeline)
    assert value.item() < 1e-12


def test_ephys_gradient_never_reaches_trailing_frames(ae, pipeline, data):
    ends = np.array([4, 9])
    index = torch.as_tensor(np.stack([ends - 2, ends - 1, ends], axis=1))
    with torch.no_grad():
        z = ae.encode(data.features[index])
    z.requires_grad_(True)
    loss = loss_ephys_latent(ae, z, data.q[index], pipeline)
    (grad,) = torch.autograd.grad(loss, z)

    assert torch.count_nonzero(grad[:, :2]).item() == 0
    assert torch.count_nonzero(grad[:, 2]).item() > 0


def test_ephys_gradient_matches_frozen_finite_differences(ae, pipeline, data, rng):
    m = 6
    index = torch.as_tensor([[m - 2, m - 1, m]])
    feats, q = data.features[index], data.q[index]

    with torch.no_grad():
        trailing = pipeline.reconstruct(ae(feats[0, :2]), q[0, :2])
    loss = loss_ephys(ae, feats, q, pipeline)
    ae.zero_grad()
    loss.backward()
    analytic = ae.fc_bias.grad.clone()

    def frozen(bias: np.ndarray) -> float:
        with torch.no_grad():
            saved = ae.fc_bias.detach().clone()
            ae.fc_bias.copy_(torch.as_tensor(bias))
            current = pipeline.reconstruct(ae(feats[0, 2:]), q[0, 2:])
            value = physics_terms(pipeline.model, trailing[:1], trailing[1:], current, q[0, 2:]).item()
            ae.fc_bias.copy_(saved)
        return value

    base = ae.fc_bias.detach().numpy().copy()
    for _ in range(2):
        direction = rng.standard_normal(base.shape)
        h = 1e-6
        numeric = (frozen(base + h * direction) - frozen(base - h * direction)) / (2 * h)
        assert float((analytic.numpy() * direction).sum()) == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_stage1_gradient_matches_finite_differences(ae, pipeline, data, rng):
    frames = np.array([0, 3, 7])
    weights = Stage1Weights(recon=1.0, vert=2.0, ephys=0.0)
    loss, parts = stage1_loss(ae, data, pipeline, frames, np.array([], dtype=np.int64), weights)
    assert set(parts) == {"recon", "vert"}
    ae.zero_grad()
    loss.backward()
    analytic = ae.convs[0].weight.grad.clone().numpy()

    def value(w: np.ndarray) -> float:
        with torch.no_grad():
            saved = ae.convs[0].weight.detach().clone()
            ae.convs[0].weight.copy_(torch.as_tensor(w))
            result = stage1_loss(ae, data, pipeline, frames, np.array([], dtype=np.int64), weights)[0].item()
            ae.convs[0].weight.copy_(saved)
        return result

    base = ae.convs[0].weight.detach().numpy().copy()
    direction = rng.standard_normal(base.shape)
    h = 1e-6
    numeric = (value(base + h * direction) - value(base - h * direction)) / (2 * h)
    assert float((analytic * direction).sum()) == pytest.approx(numeric, rel=1e-4)


def test_train_stage1_history_and_determinism(pipeline, data):
    def run():
        model = Autoencoder(pipeline.ref.adjacency, latent_dim=8, conv_layers=2, seed=0)
        return model, train_stage1(data, model, pipeline, SMALL)

    ae_a, history_a = run()
    ae_b, history_b = run()

    frame = history_a.to_frame()
    assert list(frame.columns) == ["stage", "epoch", "split", "recon", "vert", "ephys", "sim", "mphys", "total"]
    assert len(frame) == 2 * (SMALL.epochs_stage1 + 1)
    assert set(frame["split"]) == {TRAIN, TEST}
    assert np.all(np.isfinite(frame[["recon", "vert", "ephys", "total"]].to_numpy()))
    assert history_a.to_frame().equals(history_b.to_frame())
    for pa, pb in zip(ae_a.parameters(), ae_b.parameters()):
        assert torch.equal(pa, pb)


def test_train_stage1_reduces_reconstruction(pipeline, data):
    model = Autoencoder(pipeline.ref.adjacency, latent_dim=8, conv_layers=2, seed=0)
    cfg = SMALL.model_copy(update={"lr": 3e-3})
    history = train_stage1(data, model, pipeline, cfg, Stage1Weights(recon=1.0, vert=0.0, ephys=0.0), epochs=15)
    recon = history.series(TRAIN, "recon")
    assert recon[-1] < recon[0]


def test_train_stage1_divergence(pipeline, data):
    broken = TrainingData(dataset=data.dataset, features=data.features * float("nan"),
                          frames=data.frames, q=data.q)
    model = Autoencoder(pipeline.ref.adjacency, latent_dim=8, seed=0)
    with pytest.raises(DivergenceError):
        train_stage1(broken, model, pipeline, SMALL, epochs=1)


def test_ik_descends_and_pins_grasp(ae, pipeline, data, dataset5):
    q = dataset5.trajectory[10]
    with torch.no_grad():
        z0 = ae.encode(data.features[0]).numpy()
    result = ik_solve(ae, pipeline, q, z0, IkConfig(max_iter=15, step=1.0, grad_tol=1e-12))

    assert result.iterations <= 15
    assert all(b <= a for a, b in zip(result.objective, result.objective[1:]))
    np.testing.assert_allclose(result.positions[dataset5.grasp], q, atol=1e-12)
    with torch.no_grad():
        final = ik_objective(ae, pipeline, torch.as_tensor(result.z), torch.as_tensor(q)).item()
    assert final == pytest.approx(result.objective[-1], rel=1e-12)


def test_ik_reports_failed_line_search(ae, pipeline, data, dataset5, monkeypatch):
    def objective(model, pipe, z, q):
        value = ik_objective(model, pipe, z, q)
        return value if torch.is_grad_enabled() else value * float("inf")

    monkeypatch.setattr(embedding, "ik_objective", objective)
    with torch.no_grad():
        z0 = ae.encode(data.features[0]).numpy()
    result = ik_solve(ae, pipeline, dataset5.trajectory[10], z0, IkConfig(max_iter=15, step=1.0, grad_tol=1e-12))

    assert result.status == IK_LINE_SEARCH_FAILED
    assert not result.converged
    assert len(result.objective) == 1
    np.testing.assert_array_equal(result.z, z0)


def test_evaluate_embedding_reports_both_splits(ae, pipeline, data):
    metrics = evaluate_embedding(ae, data, pipeline)
    assert set(metrics) == {TRAIN, TEST}
    for split in metrics.values():
        assert set(split) == {"m_rms", "m_sted", "m_phys"}
        assert all(np.isfinite(v) for v in split.values())
