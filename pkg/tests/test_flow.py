import numpy as np
import pytest
import torch

from featflow.denoiser import DenoiserOutput, OracleDenoiser, ToyDenoiser
from featflow.errors import InvalidInputError, PipelineError
from featflow.features import InputEmbedder, SyntheticFeatureProvider
from featflow.flow import (
    FlowSchedule, FlowState, TrainConfig, aligned_mse, cfm_loss, conditional_vector_field,
    denoise_trajectory, interpolate, make_training_batch, reparameterized_vector_field,
    sample_ensemble, step_coefficients, train_toy_denoiser,
)
from featflow.geometry import kabsch_align, random_rotation
from featflow.metrics import Ensemble
from featflow.prior import build_prior, sample
from helpers import helix

SEQ = "ACDEFG"


class CountingProvider:
    def __init__(self, c_s=64, c_z=64):
        self.inner = SyntheticFeatureProvider(0, c_s, c_z)
        self.calls = 0

    def __call__(self, sequence):
        self.calls += 1
        return self.inner(sequence)


class RecordingEmbedder(torch.nn.Module):
    """Zero embedding that records every x_t it sees."""

    def __init__(self, c_s=64, c_z=64):
        super().__init__()
        self.c_s, self.c_z = c_s, c_z
        self.seen = []

    def forward(self, x, t, torsions=None, pair_mask=None):
        self.seen.append((np.array(x, dtype=np.float64), float(t), torsions))
        n = x.shape[-2]
        return torch.zeros(n, self.c_s), torch.zeros(n, n, self.c_z)


# --------------------------------------------------------------------------- path algebra


def test_interpolate_endpoints_bitwise():
    rng = np.random.default_rng(0)
    x0, x1 = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    assert np.array_equal(interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(interpolate(x0, x1, 1.0), x1)


def test_interpolate_midpoint():
    x0 = helix(5)
    x1 = x0 + np.array([2.0, 0, 0])
    assert np.allclose(interpolate(x0, x1, 0.5), x0 + np.array([1.0, 0, 0]), atol=1e-15)


def test_interpolate_errors():
    with pytest.raises(InvalidInputError):
        interpolate(np.zeros((3, 3)), np.zeros((4, 3)), 0.5)
    with pytest.raises(InvalidInputError):
        interpolate(np.zeros((3, 3)), np.zeros((3, 3)), 1.5)


def test_vector_field_examples():
    xt = np.zeros((1, 3))
    x1 = np.array([[0.5, 0, 0]])
    assert np.allclose(conditional_vector_field(xt, x1, 0.75), [[2.0, 0, 0]])
    assert np.array_equal(conditional_vector_field(x1, x1, 0.3), np.zeros((1, 3)))
    with pytest.raises(InvalidInputError):
        conditional_vector_field(xt, x1, 1.0)


def test_path_velocity_constant():
    rng = np.random.default_rng(1)
    x0, x1 = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    for t in np.linspace(0, 0.99, 25):
        u = conditional_vector_field(interpolate(x0, x1, t), x1, t)
        assert np.allclose(u, x1 - x0, atol=1e-9)


def test_reparameterized_field():
    rng = np.random.default_rng(2)
    xh, xt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    t = 0.37
    v = reparameterized_vector_field(xh, xt, t)
    for i in range(4):
        for k in range(3):
            assert v[i, k] == pytest.approx((xh[i, k] - xt[i, k]) / (1 - t), rel=1e-12)
    assert np.array_equal(reparameterized_vector_field(xt, xt, t), np.zeros((4, 3)))
    assert np.array_equal(reparameterized_vector_field(xh, xt, t), conditional_vector_field(xt, xh, t))


def test_cfm_loss_examples():
    assert cfm_loss(np.array([[1.0, 0, 0]]), np.zeros((1, 3)), 0.5) == pytest.approx(4 / 3)
    x = np.random.default_rng(3).normal(size=(5, 3))
    assert cfm_loss(x, x, 0.2) == 0.0
    y = x + 0.3
    base = cfm_loss(y, x, 0.0)
    for t in (0.1, 0.5, 0.9):
        assert cfm_loss(y, x, t) == pytest.approx(base / (1 - t) ** 2, rel=1e-12)
    with pytest.raises(InvalidInputError):
        cfm_loss(x, x, 1.0)


def test_step_coefficients_sum_to_one():
    for n in range(10):
        a, b = step_coefficients(n, 10)
        assert a + b == pytest.approx(1.0, abs=1e-15)
    assert step_coefficients(0, 10) == pytest.approx((0.1, 0.9))
    assert step_coefficients(9, 10)[1] == pytest.approx(0.0, abs=1e-12)


def test_schedule_and_state():
    assert FlowSchedule(4).times() == [0.0, 0.25, 0.5, 0.75]
    with pytest.raises(InvalidInputError):
        FlowSchedule(0)
    with pytest.raises(InvalidInputError):
        FlowState(1.2, np.zeros((2, 3)))


# --------------------------------------------------------------------------- sampler


@pytest.mark.parametrize("n_steps", [1, 3, 10])
def test_oracle_sampler_returns_target(n_steps):
    target = helix(len(SEQ)) + 3.0
    ens = sample_ensemble(OracleDenoiser(target), CountingProvider(), SEQ, FlowSchedule(n_steps),
                          n_samples=3, seed=0)
    assert all(np.array_equal(f, target) for f in ens.frames)


def test_provider_called_once_and_denoiser_n_times():
    prov = CountingProvider()
    oracle = OracleDenoiser(helix(len(SEQ)))
    sample_ensemble(oracle, prov, SEQ, FlowSchedule(7), n_samples=4, seed=0)
    assert prov.calls == 1
    assert oracle.calls == 28


def test_single_step_has_no_interpolation():
    emb = RecordingEmbedder()
    x0 = sample(build_prior(len(SEQ)), 5)
    feats = CountingProvider()(SEQ)
    out = denoise_trajectory(x0, lambda: feats, OracleDenoiser(helix(len(SEQ))), emb, SEQ, FlowSchedule(1))
    assert len(emb.seen) == 1
    assert np.array_equal(emb.seen[0][0], x0) and emb.seen[0][1] == 0.0
    assert np.array_equal(out.coords, helix(len(SEQ)))


def test_trajectory_aligns_then_interpolates():
    rng = np.random.default_rng(7)
    a = helix(len(SEQ))
    b = a @ random_rotation(rng).T + rng.normal(size=3)
    emb = RecordingEmbedder()
    x0 = sample(build_prior(len(SEQ)), 1)
    feats = CountingProvider()(SEQ)
    denoise_trajectory(x0, lambda: feats, OracleDenoiser([a, b, a]), emb, SEQ, FlowSchedule(3))
    times = [t for _, t, _ in emb.seen]
    assert times == pytest.approx([0.0, 1 / 3, 2 / 3])
    # step 0 -> 1: x_s = (1/3)/(1) * a + (2/3)/(1) * aligned(x0 onto a)
    x1 = (1 / 3) * a + (2 / 3) * kabsch_align(x0, a).aligned
    assert np.allclose(emb.seen[1][0], x1, atol=1e-12)
    # step 1 -> 2 with prediction b
    x2 = 0.5 * b + 0.5 * kabsch_align(x1, b).aligned
    assert np.allclose(emb.seen[2][0], x2, atol=1e-12)
    assert all(tor is None for *_, tor in emb.seen)


def test_embed_angles_passes_predicted_torsions():
    torch.manual_seed(0)
    den = ToyDenoiser()
    emb = RecordingEmbedder()
    feats = CountingProvider()(SEQ)
    x0 = sample(build_prior(len(SEQ)), 0)
    denoise_trajectory(x0, lambda: feats, den, emb, SEQ, FlowSchedule(3, embed_angles=True))
    assert emb.seen[0][2] is None
    assert emb.seen[1][2] is not None and tuple(emb.seen[1][2].shape) == (len(SEQ), 9)


def test_length_mismatch_is_pipeline_error():
    class Bad:
        def denoise(self, single, pair, sequence):
            return DenoiserOutput(np.zeros((len(sequence) + 1, 3)))

    with pytest.raises(PipelineError):
        sample_ensemble(Bad(), CountingProvider(), SEQ, FlowSchedule(2), n_samples=1)


def test_sampling_deterministic_and_reconstructs_atoms():
    torch.manual_seed(1)
    den = ToyDenoiser()
    emb = InputEmbedder(n_blocks=1)
    a = sample_ensemble(den, CountingProvider(), SEQ, FlowSchedule(3), n_samples=3, seed=4, embedder=emb)
    b = sample_ensemble(den, CountingProvider(), SEQ, FlowSchedule(3), n_samples=3, seed=4, embedder=emb)
    assert np.array_equal(a.frames, b.frames)
    assert a.atoms is not None and len(a.atoms) == 3
    names = {r.atom_name for r in a.atoms[0]}
    assert {"N", "CA", "C", "CB"} <= names


# --------------------------------------------------------------------------- training


def test_aligned_mse_rotation_invariant():
    rng = np.random.default_rng(0)
    x = torch.tensor(rng.normal(size=(2, 8, 3)))
    rot = torch.tensor(random_rotation(rng))
    y = x @ rot.T + 4.0
    assert torch.allclose(aligned_mse(y, x), torch.zeros(2, dtype=x.dtype), atol=1e-20)
    z = torch.tensor(rng.normal(size=(2, 8, 3)))
    ref = [kabsch_align(z[i].numpy(), x[i].numpy()).rmsd ** 2 / 3 for i in range(2)]
    assert np.allclose(aligned_mse(z, x).numpy(), ref, atol=1e-12)


def test_training_batch_aligns_noise():
    frames = helix(10)[None] + np.zeros((3, 1, 1))
    prior = build_prior(10)
    xt, x1, t = make_training_batch(frames, prior, np.random.default_rng(0), 4, 0.9)
    assert xt.shape == (4, 10, 3) and np.all((t >= 0) & (t <= 0.9))
    for b in range(4):
        x0 = (xt[b] - t[b] * x1[b]) / (1 - t[b])
        # the implied prior sample is already superposed on the frame
        assert kabsch_align(x0, x1[b]).rmsd == pytest.approx(
            np.sqrt(np.mean(np.sum((x0 - x1[b]) ** 2, axis=1))), abs=1e-6)


def _single_frame(n=6):
    return Ensemble(helix(n)[None] * 1.0, None, "one", "ACDEFG"[:n])


def test_zero_step_training_keeps_parameters():
    torch.manual_seed(0)
    init = train_toy_denoiser([_single_frame()], TrainConfig(steps=0, embed_blocks=1))
    before = {k: v.clone() for k, v in init.denoiser.state_dict().items()}
    res = train_toy_denoiser([_single_frame()], TrainConfig(steps=0), init=init)
    for k, v in res.denoiser.state_dict().items():
        assert torch.equal(v, before[k])
    assert res.losses == []


def test_single_frame_memorization():
    cfg = TrainConfig(steps=50, batch_size=8, lr=3e-3, embed_blocks=0, resample_noise=False,
                      grad_clip=None, time_weighted=False, seed=0)
    res = train_toy_denoiser([_single_frame()], cfg)
    losses = np.array(res.losses)
    # per-step losses jitter with the sampled t, so compare windows
    assert losses[-10:].mean() < losses[:10].mean()
    assert losses[-1] < 0.1 * losses[0]
    assert res.heldout_final < res.heldout_initial


def test_training_requires_sequence_and_data():
    with pytest.raises(InvalidInputError):
        train_toy_denoiser([])
    with pytest.raises(InvalidInputError):
        train_toy_denoiser([Ensemble(helix(4)[None], None, "x", None)])
