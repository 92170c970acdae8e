import numpy as np
import pytest
import torch

from shellflow.config import Stage2Weights, Stage3Weights, TrainConfig
from shellflow.embedding import Pipeline, TrainingData, physics_terms
from shellflow.errors import ShapeMismatchError
from shellflow.latent_dyn import (
    LatentMLP,
    blend_latent,
    encode_sequence,
    evaluate_prediction,
    finetune_stage3,
    loss_mphys,
    loss_sim,
    mlp_step,
    predict_three_frame,
    rollout_latent,
    train_stage2,
    unroll,
    unroll_windows,
)
from shellflow.metrics import TEST, TRAIN, split_labels
from shellflow.nn_core import Autoencoder

LATENT = 8
SMALL = TrainConfig(latent_dim=LATENT, mlp_hidden=[16, 16], batch_size=4, unroll=4,
                    epochs_stage2=2, epochs_stage3=1, seed=0)


@pytest.fixture(scope="module")
def pipeline(dataset5):
    return Pipeline.build(dataset5.mesh, dataset5.sim, dataset5.grasp)


@pytest.fixture(scope="module")
def data(dataset5, pipeline):
    return TrainingData.from_dataset(dataset5, pipeline.ref)


@pytest.fixture
def ae(pipeline, data):
    model = Autoencoder(pipeline.ref.adjacency, latent_dim=LATENT, conv_layers=1, seed=0)
    model.set_feature_scaling(data.features.numpy())
    return model


@pytest.fixture
def mlp(data):
    model = LatentMLP(LATENT, 2, hidden=(16, 16), seed=0)
    model.set_origin(data.q[0])
    return model


class CopyPrevious(torch.nn.Module):
    def forward(self, z_prev2, z_prev1, q):
        return z_prev1


def test_layer_plan():
    mlp = LatentMLP(6, 2, hidden=(10, 12))
    assert mlp.layer_plan() == {"latent_dim": 6, "n_grasp": 2, "input_width": 18, "hidden": [10, 12], "slope": 0.1}
    assert [layer.out_features for layer in mlp.layers] == [10, 12, 6]


def test_zero_weights_give_final_bias():
    mlp = LatentMLP(4, 2, hidden=(5, 5))
    with torch.no_grad():
        for layer in mlp.layers:
            layer.weight.zero_()
        mlp.layers[-1].bias.copy_(torch.arange(4.0, dtype=torch.float64))
    out = mlp_step(mlp, torch.randn(4, dtype=torch.float64), torch.randn(4, dtype=torch.float64), np.ones((2, 3)))
    np.testing.assert_array_equal(out.detach().numpy(), [0.0, 1.0, 2.0, 3.0])


def test_shape_errors():
    mlp = LatentMLP(4, 2, hidden=(5,))
    z = torch.zeros(4, dtype=torch.float64)
    with pytest.raises(ShapeMismatchError):
        mlp(z, z, torch.zeros(3, 3, dtype=torch.float64))
    with pytest.raises(ShapeMismatchError):
        mlp(z, torch.zeros(5, dtype=torch.float64), torch.zeros(2, 3, dtype=torch.float64))


def test_grasp_targets_are_relative_to_origin():
    mlp = LatentMLP(4, 2, hidden=(5,))
    mlp.set_origin([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
    np.testing.assert_array_equal(mlp.origin.numpy(), [2.0, 2.0, 2.0])
    q = torch.full((2, 3), 2.0, dtype=torch.float64)
    np.testing.assert_array_equal(mlp.grasp_features(q).numpy(), np.zeros(6))


def test_overfits_single_transition(rng):
    mlp = LatentMLP(4, 2, hidden=())
    z_a, z_b, z_c = (torch.as_tensor(rng.standard_normal(4)) for _ in range(3))
    q = torch.as_tensor(rng.standard_normal((2, 3)))
    x = torch.cat([z_a, z_b, mlp.grasp_features(q)])
    # exact step length for the single-sample linear least-squares problem
    optimizer = torch.optim.SGD(mlp.parameters(), lr=0.5 / (float(x @ x) + 1.0))
    for _ in range(20):
        optimizer.zero_grad()
        ((mlp(z_a, z_b, q) - z_c) ** 2).sum().backward()
        optimizer.step()
    np.testing.assert_allclose(mlp(z_a, z_b, q).detach().numpy(), z_c.numpy(), atol=1e-4)


def test_output_change_bounded_by_operator_norms(rng):
    mlp = LatentMLP(4, 2, hidden=(8, 8), seed=3)
    bound = float(np.prod([torch.linalg.matrix_norm(layer.weight.detach(), ord=2).item() for layer in mlp.layers]))
    with torch.no_grad():
        for _ in range(10):
            x = torch.as_tensor(rng.standard_normal(mlp.input_width))
            delta = 1e-3 * torch.as_tensor(rng.standard_normal(mlp.input_width))

            def run(v):
                return mlp(v[:4], v[4:8], v[8:].reshape(2, 3))

            change = torch.linalg.vector_norm(run(x + delta) - run(x)).item()
            assert change <= bound * torch.linalg.vector_norm(delta).item() * (1 + 1e-12)


def test_loss_sim_copying_mlp_on_constant_sequence():
    z = torch.ones(5, 3, dtype=torch.float64)
    q = torch.zeros(5, 2, 3, dtype=torch.float64)
    assert loss_sim(CopyPrevious(), z, q).item() == 0.0


def test_loss_sim_matches_direct_computation(mlp, rng):
    z = torch.as_tensor(rng.standard_normal((6, LATENT)))
    q = torch.as_tensor(rng.standard_normal((6, 2, 3)))
    expected = np.mean([((mlp(z[m - 2], z[m - 1], q[m]) - z[m]) ** 2).sum().item() for m in range(2, 6)])
    assert loss_sim(mlp, z, q).item() == pytest.approx(expected, rel=1e-12)

    single = ((mlp(z[0], z[1], q[2]) - z[2]) ** 2).sum().item()
    assert loss_sim(mlp, z[:3], q[:3]).item() == pytest.approx(single, rel=1e-12)
    with pytest.raises(ShapeMismatchError):
        loss_sim(mlp, z[:2], q[:2])


def test_mphys_gradient_matches_frozen_finite_differences(ae, mlp, pipeline, data, rng):
    z = encode_sequence(ae, data.features)
    window = slice(3, 7)
    z_seed, q = z[3:5], data.q[window]
    last = mlp.layers[-1]

    loss = loss_mphys(mlp, ae, pipeline, z_seed, q)
    mlp.zero_grad()
    loss.backward()
    analytic = last.bias.grad.clone().numpy()

    def positions() -> torch.Tensor:
        latents = torch.cat([z_seed, unroll(mlp, z_seed[0], z_seed[1], q[2:])])
        return pipeline.reconstruct(ae.decode(latents), q)

    with torch.no_grad():
        fixed = positions()

    def frozen(bias: np.ndarray) -> float:
        with torch.no_grad():
            saved = last.bias.detach().clone()
            last.bias.copy_(torch.as_tensor(bias))
            current = positions()[2:]
            value = physics_terms(pipeline.model, fixed[:-2], fixed[1:-1], current, q[2:]).item()
            last.bias.copy_(saved)
        return value

    base = last.bias.detach().numpy().copy()
    h = 1e-6
    for _ in range(2):
        direction = rng.standard_normal(base.shape)
        numeric = (frozen(base + h * direction) - frozen(base - h * direction)) / (2 * h)
        assert float((analytic * direction).sum()) == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_mphys_keeps_recurrent_chain(ae, mlp, pipeline, data):
    z = encode_sequence(ae, data.features)
    z_seed = z[3:5].clone().requires_grad_(True)
    loss = loss_mphys(mlp, ae, pipeline, z_seed, data.q[3:7])
    (grad,) = torch.autograd.grad(loss, z_seed)
    # the seeds reach every predicted frame through the MLP
    assert torch.count_nonzero(grad).item() > 0


def test_mphys_needs_three_frames(ae, mlp, pipeline, data):
    z = encode_sequence(ae, data.features)
    with pytest.raises(ShapeMismatchError):
        loss_mphys(mlp, ae, pipeline, z[:2], data.q[:2])


def test_unroll_windows():
    split = split_labels(34)
    starts = unroll_windows(split, 8)
    np.testing.assert_array_equal(starts, [0, 1, 2, 3, 4, 17, 18, 19, 20, 21])
    assert unroll_windows(split_labels(5), 8).size == 0


def test_blend_with_matching_prediction_is_exact(rng):
    z = torch.as_tensor(rng.standard_normal(7))
    assert torch.equal(blend_latent(z, z.clone()), z)
    assert torch.equal(blend_latent(z, torch.zeros(7, dtype=torch.float64), blend=1.0), z)


def test_rollout_of_two_frames_is_empty(ae, mlp, pipeline, data):
    z = encode_sequence(ae, data.features)
    result = rollout_latent(mlp, ae, pipeline, z[0], z[1], data.q[:2])
    assert result.n_frames == 0
    assert result.frames.shape == (0, 25, 3)
    assert result.latents.shape == (0, LATENT)


def test_rollout_first_step_matches_teacher_forcing(ae, mlp, pipeline, data):
    z = encode_sequence(ae, data.features)
    result = rollout_latent(mlp, ae, pipeline, z[0], z[1], data.q[:6])
    assert result.n_frames == 4
    assert result.seconds >= 0.0
    with torch.no_grad():
        expected = mlp(z[0], z[1], data.q[2])
    np.testing.assert_array_equal(result.latents[0], expected.numpy())
    np.testing.assert_allclose(result.frames[:, pipeline.model.grasp], data.q[2:6].numpy(), atol=1e-12)


def test_predict_three_frame(ae, mlp, pipeline, data):
    candidate, previous = predict_three_frame(ae, mlp, pipeline, data)
    assert candidate.shape == previous.shape == (20, 25, 3)
    np.testing.assert_array_equal(candidate[:2], previous[:2])

    metrics = evaluate_prediction(ae, mlp, pipeline, data)
    assert set(metrics) == {TRAIN, TEST}
    assert all(np.isfinite(v) for split in metrics.values() for v in split.values())


def test_train_stage2_freezes_autoencoder_and_is_deterministic(ae, pipeline, data):
    before = {name: p.detach().clone() for name, p in ae.named_parameters()}

    def run():
        model = LatentMLP(LATENT, 2, hidden=SMALL.mlp_hidden, seed=0)
        return model, train_stage2(data, ae, model, pipeline, SMALL)

    mlp_a, history_a = run()
    mlp_b, history_b = run()

    for name, p in ae.named_parameters():
        assert torch.equal(p, before[name])
        assert p.requires_grad
    for pa, pb in zip(mlp_a.parameters(), mlp_b.parameters()):
        assert torch.equal(pa, pb)
    frame = history_a.to_frame()
    assert frame.equals(history_b.to_frame())
    assert len(frame) == 2 * (SMALL.epochs_stage2 + 1)
    assert set(frame["stage"]) == {2}
    assert np.all(np.isfinite(frame[["sim", "mphys", "total"]].to_numpy()))
    np.testing.assert_allclose(mlp_a.origin.numpy(), data.q[0].mean(dim=0).numpy())


def test_train_stage2_without_mphys_reduces_sim(ae, pipeline, data):
    mlp = LatentMLP(LATENT, 2, hidden=SMALL.mlp_hidden, seed=0)
    cfg = SMALL.model_copy(update={"lr": 3e-3})
    history = train_stage2(data, ae, mlp, pipeline, cfg, Stage2Weights(sim=1.0, mphys=0.0), epochs=10)
    sim = history.series(TRAIN, "sim")
    assert sim[-1] < sim[0]


def test_finetune_stage3_updates_both_networks(ae, mlp, pipeline, data):
    ae_before = ae.fc_weight.detach().clone()
    mlp_before = mlp.layers[0].weight.detach().clone()
    history = finetune_stage3(data, ae, mlp, pipeline, SMALL, Stage3Weights(ephys=0.1))

    frame = history.to_frame()
    assert len(frame) == 2 * (SMALL.epochs_stage3 + 1)
    assert np.all(np.isfinite(frame[["recon", "vert", "ephys", "sim", "total"]].to_numpy()))
    assert not torch.equal(ae.fc_weight.detach(), ae_before)
    assert not torch.equal(mlp.layers[0].weight.detach(), mlp_before)


def test_contractive_rollout_stays_bounded(ae, pipeline, data):
    mlp = LatentMLP(LATENT, 2, hidden=(16, 16), seed=2)
    mlp.set_origin(data.q[0])
    norms = [torch.linalg.matrix_norm(layer.weight.detach(), ord=2).item() for layer in mlp.layers]
    lipschitz = 0.5
    factor = (lipschitz / float(np.prod(norms))) ** (1.0 / len(mlp.layers))
    with torch.no_grad():
        for layer in mlp.layers:
            layer.weight.mul_(factor)
            layer.bias.normal_(generator=torch.Generator().manual_seed(7))

    z = encode_sequence(ae, data.features)
    q = data.q[:1].repeat(102, 1, 1)
    result = rollout_latent(mlp, ae, pipeline, z[0], z[1], q)
    assert result.n_frames == 100
    assert np.all(np.isfinite(result.frames))

    # |z_k| <= rho * max(|z_{k-1}|, |z_{k-2}|) + |MLP(0, 0, q)| with rho = sqrt(2) * lipschitz
    rho = np.sqrt(2.0) * lipschitz
    zero = torch.zeros(LATENT, dtype=torch.float64)
    with torch.no_grad():
        offset = torch.linalg.vector_norm(mlp(zero, zero, q[0])).item()
    start = max(torch.linalg.vector_norm(z[0]).item(), torch.linalg.vector_norm(z[1]).item())
    bound = max(start, offset / (1.0 - rho))
    assert np.linalg.norm(result.latents, axis=1).max() <= bound * (1.0 + 1e-9)

    # the frozen-grasp system settles to a fixed point
    sequence = np.concatenate([z[:2].detach().numpy(), result.latents])
    steps = np.linalg.norm(np.diff(sequence, axis=0), axis=1)
    assert steps[-1] < 1e-4 * steps[:2].max() + 1e-12
