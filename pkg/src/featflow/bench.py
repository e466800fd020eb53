"""Runtime scaling benchmark: trunk features per step versus once per target.

Both modes run the same sampler, embedder, denoiser and seed. The only
difference is where a heavy pair stack (triangle blocks at the trunk width)
is evaluated: inside every denoising step, or once before the loop.
"""

from __future__ import annotations

import contextlib
import csv
import io as _io
import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from featflow.denoiser import ToyDenoiser
from featflow.errors import FitError, InvalidInputError, TableError
from featflow.features import AMINO_ACIDS, InputEmbedder, PairStack, SyntheticFeatureProvider, randomize_parameters
from featflow.flow import FlowSchedule, denoise_trajectory
from featflow.prior import build_prior, sample

log = logging.getLogger(__name__)

PER_STEP = "per-step-heavy"
PRECOMPUTE = "precompute-once"
MODES = (PER_STEP, PRECOMPUTE)
BENCH_DENOISER_WIDTH = 16
BENCH_DENOISER_ROUNDS = 2


@dataclass
class BenchmarkRecord:
    chain_length: int
    mode: str
    n_steps: int
    wall_time: float
    repetitions: int


@dataclass
class BenchmarkResult:
    records: list[BenchmarkRecord] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    coords: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)


@dataclass
class FitResult:
    exponent: float
    coefficient: float
    r_squared: float

    def predict(self, length) -> np.ndarray:
        return self.coefficient * np.asarray(length, dtype=np.float64) ** self.exponent


@dataclass
class SpeedupTable:
    lengths: list[int]
    ratios: list[float]
    mean: float


def benchmark_sequence(length: int) -> str:
    return "".join(AMINO_ACIDS[i % len(AMINO_ACIDS)] for i in range(length))


@contextlib.contextmanager
def torch_threads(n: int | None):
    if n is None:
        yield
        return
    old = torch.get_num_threads()
    torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(old)


class HeavyTrunk:
    """Synthetic features passed through a randomly initialized pair stack."""

    def __init__(self, seed: int = 0, c_s: int = 64, c_z: int = 64, n_blocks: int = 4):
        self.provider = SyntheticFeatureProvider(seed, c_s, c_z)
        self.stack = randomize_parameters(PairStack(n_blocks, c_z), seed + 1, scale=0.5).eval()
        self.calls = 0

    def __call__(self, sequence: str):
        self.calls += 1
        single, pair = self.provider(sequence)
        with torch.no_grad():
            return single, self.stack(pair)


def _sample_once(mode: str, trunk: HeavyTrunk, embedder, denoiser, sequence: str,
                 schedule: FlowSchedule, x0: np.ndarray) -> np.ndarray:
    if mode == PER_STEP:
        def features():
            return trunk(sequence)
    elif mode == PRECOMPUTE:
        cached = trunk(sequence)

        def features():
            return cached
    else:
        raise InvalidInputError(f"unknown benchmark mode {mode!r}")
    with torch.inference_mode():
        return denoise_trajectory(x0, features, denoiser, embedder, sequence, schedule).coords


def run_benchmark(lengths: Sequence[int], n_steps: int = 10, repetitions: int = 3, seed: int = 0,
                  modes: Iterable[str] = MODES, threads: int | None = 1,
                  warmup: str = "each", denoiser_width: int = BENCH_DENOISER_WIDTH,
                  denoiser_rounds: int = BENCH_DENOISER_ROUNDS) -> BenchmarkResult:
    """Time one sampled conformation per (length, mode); median over repetitions.

    ``warmup`` is ``"each"`` (one discarded run per length and mode),
    ``"first"`` (one per mode at the first length only) or ``"none"``.
    The denoiser is deliberately small so that the light path stays light
    next to the four-block pair stack even at short lengths.
    """
    if warmup not in ("each", "first", "none"):
        raise InvalidInputError(f"unknown warmup policy {warmup!r}")
    if n_steps < 1:
        raise InvalidInputError("n_steps must be at least 1")
    lengths = list(lengths)
    modes = list(modes)
    if not lengths or lengths != sorted(lengths):
        raise InvalidInputError("lengths must be non-empty and ascending")
    unknown = [m for m in modes if m not in MODES]
    if unknown or not modes:
        raise InvalidInputError(f"modes must be a non-empty subset of {MODES}, got {modes}")
    if repetitions < 3:
        raise InvalidInputError("at least 3 repetitions are required")
    result = BenchmarkResult()
    res = time.get_clock_info("perf_counter").resolution
    if res > 1e-3:
        result.warnings.append(f"timer resolution {res:g}s is coarser than 1 ms")

    schedule = FlowSchedule(n_steps)
    with torch_threads(threads):
        torch.manual_seed(seed)
        trunk = HeavyTrunk(seed)
        embedder = InputEmbedder(n_blocks=0).eval()
        denoiser = ToyDenoiser(width=denoiser_width, n_rounds=denoiser_rounds)
        denoiser = randomize_parameters(denoiser, seed + 2, scale=0.5).eval()
        for li, length in enumerate(lengths):
            seq = benchmark_sequence(length)
            x0 = sample(build_prior(length), seed)
            for mode in modes:
                if warmup == "each" or (warmup == "first" and li == 0):
                    _sample_once(mode, trunk, embedder, denoiser, seq, schedule, x0)
                times = []
                for _ in range(repetitions):
                    t0 = time.perf_counter()
                    coords = _sample_once(mode, trunk, embedder, denoiser, seq, schedule, x0)
                    times.append(time.perf_counter() - t0)
                result.coords[(length, mode)] = coords
                rec = BenchmarkRecord(length, mode, n_steps, statistics.median(times), repetitions)
                log.info("length %d %s: %.4fs", length, mode, rec.wall_time)
                result.records.append(rec)
    return result


def fit_power_law_arrays(lengths, times) -> FitResult:
    """Least squares fit of log(time) = log(coefficient) + exponent * log(length)."""
    lengths = np.asarray(lengths, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if len(np.unique(lengths)) < 3:
        raise FitError("a power-law fit needs at least 3 distinct lengths")
    if np.any(lengths <= 0) or np.any(times <= 0):
        raise FitError("lengths and times must be positive")
    lx, ly = np.log(lengths), np.log(times)
    design = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot <= 1e-300 else 1.0 - ss_res / ss_tot
    return FitResult(float(slope), float(np.exp(intercept)), min(1.0, max(0.0, r2)))


def fit_power_law(records: Sequence[BenchmarkRecord]) -> FitResult:
    modes = {r.mode for r in records}
    if len(modes) > 1:
        raise FitError(f"records mix modes {sorted(modes)}")
    return fit_power_law_arrays([r.chain_length for r in records], [r.wall_time for r in records])


def speedup_table(records: Sequence[BenchmarkRecord]) -> SpeedupTable:
    """Per-length ratio of per-step-heavy to precompute-once wall time."""
    by_mode: dict[str, dict[int, float]] = {PER_STEP: {}, PRECOMPUTE: {}}
    for r in records:
        if r.mode in by_mode:
            by_mode[r.mode][r.chain_length] = r.wall_time
    lengths = sorted(set(by_mode[PER_STEP]) | set(by_mode[PRECOMPUTE]))
    if not lengths:
        raise TableError("no benchmark records")
    ratios = []
    for length in lengths:
        if length not in by_mode[PER_STEP] or length not in by_mode[PRECOMPUTE]:
            raise TableError(f"length {length} lacks one of the two modes")
        ratios.append(by_mode[PER_STEP][length] / by_mode[PRECOMPUTE][length])
    return SpeedupTable(lengths, ratios, float(np.mean(ratios)))


def records_csv(records: Sequence[BenchmarkRecord]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["chain_length", "mode", "n_steps", "wall_time", "repetitions"])
    for r in records:
        w.writerow([r.chain_length, r.mode, r.n_steps, f"{r.wall_time:.6f}", r.repetitions])
    return buf.getvalue()


def read_records_csv(text: str) -> list[BenchmarkRecord]:
    rows = csv.DictReader(_io.StringIO(text))
    return [BenchmarkRecord(int(r["chain_length"]), r["mode"], int(r["n_steps"]),
                            float(r["wall_time"]), int(r["repetitions"])) for r in rows]
