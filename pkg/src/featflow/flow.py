"""Conditional flow matching on residue coordinates.

Linear interpolation path between a harmonic-prior sample and data, the
regression-reparameterized vector field, the loss, the multi-step sampler and
a small training loop for the toy denoiser.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from featflow.denoiser import Denoiser, DenoiserOutput, ToyDenoiser, reconstruct_backbone
from featflow.errors import InvalidInputError, PipelineError
from featflow.features import FeatureProvider, InputEmbedder, condition
from featflow.geometry import TorsionFeatures, as_coords, kabsch_align, kabsch_rotation
from featflow.metrics import Ensemble
from featflow.prior import DEFAULT_ALPHA, build_prior, sample, sample_many

log = logging.getLogger(__name__)


@dataclass
class FlowState:
    t: float
    x_t: np.ndarray
    torsions: TorsionFeatures | None = None

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise InvalidInputError(f"flow time must lie in [0, 1], got {self.t}")
        self.x_t = as_coords(self.x_t, "x_t")


@dataclass(frozen=True)
class FlowSchedule:
    n_steps: int = 10
    embed_angles: bool = False

    def __post_init__(self):
        if self.n_steps < 1:
            raise InvalidInputError("a schedule needs at least one step")

    def times(self) -> list[float]:
        return [n / self.n_steps for n in range(self.n_steps)]


def interpolate(x0, x1, t: float) -> np.ndarray:
    x0 = as_coords(x0, "x0")
    x1 = as_coords(x1, "x1")
    if x0.shape != x1.shape:
        raise InvalidInputError("x0 and x1 differ in length")
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return x0.copy()
    if t == 1.0:
        return x1.copy()
    return (1.0 - t) * x0 + t * x1


def _check_t(t: float) -> None:
    if not t < 1.0:
        raise InvalidInputError("the vector field is singular at t = 1")


def conditional_vector_field(xt, x1, t: float) -> np.ndarray:
    _check_t(t)
    xt = as_coords(xt, "xt")
    x1 = as_coords(x1, "x1")
    if xt.shape != x1.shape:
        raise InvalidInputError("length mismatch")
    return (x1 - xt) / (1.0 - t)


def reparameterized_vector_field(xhat1, xt, t: float) -> np.ndarray:
    """Velocity implied by a denoiser prediction of the clean structure."""
    return conditional_vector_field(xt, xhat1, t)


def cfm_loss(xhat1, x1, t: float) -> float:
    """Mean squared per-coordinate error between predicted and target velocities."""
    _check_t(t)
    xhat1 = as_coords(xhat1, "xhat1")
    x1 = as_coords(x1, "x1")
    if xhat1.shape != x1.shape:
        raise InvalidInputError("length mismatch")
    diff = (xhat1 - x1) / (1.0 - t)
    return float(np.mean(diff * diff))


def step_coefficients(n: int, n_steps: int) -> tuple[float, float]:
    """Weights of (prediction, current state) when moving from t = n/N to s = t + 1/N."""
    t = n / n_steps
    s = t + 1.0 / n_steps
    return (s - t) / (1.0 - t), (1.0 - s) / (1.0 - t)


FeatureFn = Callable[[], tuple[torch.Tensor, torch.Tensor]]


def denoise_trajectory(x0: np.ndarray, features: FeatureFn, denoiser: Denoiser,
                       embedder: InputEmbedder, sequence: str,
                       schedule: FlowSchedule) -> DenoiserOutput:
    """Run the N-step sampler from ``x0``.

    ``features`` is called at every step to obtain the trunk features; the
    standard sampler passes a closure over features computed once up front.
    """
    x_t = np.asarray(x0, dtype=np.float64)
    tor: TorsionFeatures | None = None
    n_res = len(sequence)
    for n in range(schedule.n_steps):
        t = n / schedule.n_steps
        tor_in = None
        if schedule.embed_angles and tor is not None:
            tor_in = torch.from_numpy(tor.as_input())
        with torch.no_grad():
            emb_s, emb_z = embedder(torch.from_numpy(x_t), t, tor_in)
            single, pair = features()
            single, pair = condition(single, pair, emb_s, emb_z)
        out = denoiser.denoise(single, pair, sequence)
        if np.shape(out.coords) != (n_res, 3):
            raise PipelineError(
                f"denoiser returned {np.shape(out.coords)} coordinates for a {n_res}-residue sequence")
        if n == schedule.n_steps - 1:
            return out
        xhat = np.asarray(out.coords, dtype=np.float64)
        x_t = kabsch_align(x_t, xhat).aligned
        w_pred, w_cur = step_coefficients(n, schedule.n_steps)
        x_t = w_pred * xhat + w_cur * x_t
        tor = out.torsions if schedule.embed_angles else None
    raise AssertionError("unreachable")


def sample_ensemble(denoiser: Denoiser, provider: FeatureProvider, sequence: str,
                    schedule: FlowSchedule | None = None, n_samples: int = 250, seed: int = 0,
                    embedder: InputEmbedder | None = None, alpha: float = DEFAULT_ALPHA,
                    target_id: str = "sample") -> Ensemble:
    """Generate ``n_samples`` conformations; trunk features are computed exactly once."""
    schedule = schedule or FlowSchedule()
    if embedder is None:
        pair_c = getattr(denoiser, "c_z", 64)
        single_c = getattr(denoiser, "c_s", 64)
        embedder = InputEmbedder(c_s=single_c, c_z_out=pair_c)
    embedder.eval()
    prior = build_prior(len(sequence), alpha)
    single_evo, pair_evo = provider(sequence)

    def features():
        return single_evo, pair_evo

    seeds = np.random.SeedSequence(seed).spawn(n_samples)
    frames, atoms = [], []
    for k in range(n_samples):
        x0 = sample(prior, np.random.default_rng(seeds[k]))
        out = denoise_trajectory(x0, features, denoiser, embedder, sequence, schedule)
        frames.append(np.asarray(out.coords, dtype=np.float64))
        if out.torsions is not None:
            atoms.append(reconstruct_backbone(out.coords, out.torsions, sequence))
    return Ensemble(np.stack(frames), atoms if len(atoms) == n_samples else None,
                    target_id=target_id, sequence=sequence)


# --------------------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    time_weighted: bool = True
    t_max: float = 0.9
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    c_s: int = 64
    c_z: int = 64
    embed_blocks: int = 4
    width: int = 32
    n_rounds: int = 4
    resample_noise: bool = True
    heldout_size: int = 32
    grad_clip: float | None = 1.0
    lr_schedule: str = "constant"  # or "cosine" (decays to zero at the last step)
    log_every: int = 0


@dataclass
class TrainResult:
    embedder: InputEmbedder
    denoiser: ToyDenoiser
    losses: list[float] = field(default_factory=list)
    heldout_initial: float = float("nan")
    heldout_final: float = float("nan")


def aligned_mse(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-example MSE after optimal rigid superposition of ``pred`` onto ``target``.

    The rotation is found without gradient; at the optimum its derivative does
    not contribute to the loss gradient, so the result is the exact gradient
    of the superposed MSE.
    """
    pc = pred - pred.mean(dim=-2, keepdim=True)
    tc = target - target.mean(dim=-2, keepdim=True)
    with torch.no_grad():
        h = pc.transpose(-1, -2).double() @ tc.double()
        u, _, vh = torch.linalg.svd(h)
        d = torch.sign(torch.linalg.det(vh.transpose(-1, -2) @ u.transpose(-1, -2)))
        d = torch.where(d == 0, torch.ones_like(d), d)
        diag = torch.ones(*d.shape, 3, dtype=h.dtype)
        diag[..., 2] = d
        rot = vh.transpose(-1, -2) @ (diag[..., :, None] * u.transpose(-1, -2))
    aligned = pc @ rot.to(pc.dtype).transpose(-1, -2)
    return ((aligned - tc) ** 2).mean(dim=(-1, -2))


def flow_loss(embedder: InputEmbedder, denoiser: ToyDenoiser, single_evo, pair_evo,
              x_t, x1, t, time_weighted: bool = True) -> torch.Tensor:
    """Batch loss: embed x_t, condition, denoise, superposed MSE against x1."""
    dtype = denoiser.single_in.weight.dtype
    t = torch.as_tensor(t, dtype=dtype)
    emb_s, emb_z = embedder(torch.as_tensor(x_t), t)
    single, pair = condition(single_evo.to(dtype), pair_evo.to(dtype), emb_s, emb_z)
    xhat, _ = denoiser(single, pair)
    per = aligned_mse(xhat, torch.as_tensor(x1, dtype=dtype))
    if time_weighted:
        per = per / (1.0 - t) ** 2
    return per.mean()


def make_training_batch(frames: np.ndarray, prior, rng: np.random.Generator, batch_size: int,
                        t_max: float):
    """Uniform frame, uniform t in [0, t_max], prior noise superposed onto the frame."""
    idx = rng.integers(0, len(frames), size=batch_size)
    x1 = frames[idx]
    t = rng.uniform(0.0, t_max, size=batch_size)
    x0 = sample_many(prior, batch_size, rng)
    xt = np.empty_like(x1)
    for b in range(batch_size):
        c1 = x1[b] - x1[b].mean(axis=0)
        rot = kabsch_rotation(x0[b], c1)
        x0b = x0[b] @ rot.T + x1[b].mean(axis=0)
        xt[b] = (1.0 - t[b]) * x0b + t[b] * x1[b]
    return xt, x1, t


def train_toy_denoiser(dataset: Sequence[Ensemble], config: TrainConfig | None = None,
                       provider: FeatureProvider | None = None,
                       init: TrainResult | None = None) -> TrainResult:
    """Fit an embedder + toy denoiser by flow-matching regression.

    Each step draws one target, a batch of its frames, times and prior noise,
    and takes one Adam step on the (optionally time-weighted) superposed MSE.
    """
    from featflow.features import SyntheticFeatureProvider

    cfg = config or TrainConfig()
    if not dataset:
        raise InvalidInputError("training needs at least one ensemble")
    for e in dataset:
        if e.sequence is None or len(e.sequence) != e.n_residues:
            raise InvalidInputError(f"ensemble {e.target_id!r} needs a sequence matching its frames")
    provider = provider or SyntheticFeatureProvider(seed=cfg.seed, c_s=cfg.c_s, c_z=cfg.c_z)
    torch.manual_seed(cfg.seed)
    if init is None:
        embedder = InputEmbedder(c_s=cfg.c_s, c_z_out=cfg.c_z, n_blocks=cfg.embed_blocks)
        denoiser = ToyDenoiser(c_s=cfg.c_s, c_z=cfg.c_z, width=cfg.width, n_rounds=cfg.n_rounds)
    else:
        embedder, denoiser = init.embedder, init.denoiser
    features = [provider(e.sequence) for e in dataset]
    priors = [build_prior(e.n_residues, cfg.alpha) for e in dataset]
    rng = np.random.default_rng(cfg.seed)

    held_rng = np.random.default_rng(cfg.seed + 7919)
    heldout = []
    for e, p in zip(dataset, priors):
        heldout.append(make_training_batch(e.frames, p, held_rng, cfg.heldout_size, cfg.t_max))

    def heldout_loss() -> float:
        with torch.no_grad():
            vals = [flow_loss(embedder, denoiser, s, z, xt, x1, t, cfg.time_weighted).item()
                    for (s, z), (xt, x1, t) in zip(features, heldout)]
        return float(np.mean(vals))

    result = TrainResult(embedder, denoiser)
    result.heldout_initial = heldout_loss()
    if cfg.steps == 0:
        result.heldout_final = result.heldout_initial
        return result

    params = list(embedder.parameters()) + list(denoiser.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)
    elif cfg.lr_schedule == "constant":
        sched = None
    else:
        raise InvalidInputError(f"unknown lr_schedule {cfg.lr_schedule!r}")
    fixed_batches = None
    if not cfg.resample_noise:
        fixed_batches = [make_training_batch(e.frames, p, rng, cfg.batch_size, cfg.t_max)
                         for e, p in zip(dataset, priors)]
    embedder.train()
    denoiser.train()
    for step in range(cfg.steps):
        k = int(rng.integers(0, len(dataset)))
        if fixed_batches is not None:
            xt, x1, t = fixed_batches[k]
        else:
            xt, x1, t = make_training_batch(dataset[k].frames, priors[k], rng, cfg.batch_size, cfg.t_max)
        s, z = features[k]
        loss = flow_loss(embedder, denoiser, s, z, xt, x1, t, cfg.time_weighted)
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        if sched is not None:
            sched.step()
        result.losses.append(float(loss.item()))
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("step %d loss %.4f", step + 1, np.mean(result.losses[-cfg.log_every:]))
    embedder.eval()
    denoiser.eval()
    result.heldout_final = heldout_loss()
    return result
