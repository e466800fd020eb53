"""Ensemble-versus-ensemble evaluation metrics and cross-target aggregation.

All distances are in Angstrom. JSD values use base-2 logarithms so they lie
in [0, 1].
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from featflow.errors import InvalidInputError, UndefinedMetricError
from featflow.geometry import (
    AtomRecord,
    compute_torsions,
    kabsch_align,
    kabsch_rotation,
    pairwise_distances,
)


@dataclass
class Ensemble:
    """Frames of one chain.

    ``frames`` holds the coordinates used by the metrics, shape ``(M, n, 3)``;
    ``atoms`` optionally holds the full atom records of each frame.
    """

    frames: np.ndarray
    atoms: list[list[AtomRecord]] | None = None
    target_id: str = "target"
    sequence: str | None = None

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim == 2:
            f = f[None]
        if f.ndim != 3 or f.shape[0] < 1 or f.shape[2] != 3:
            raise InvalidInputError(f"ensemble frames must have shape (M, n, 3), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise InvalidInputError("ensemble frames contain non-finite values")
        self.frames = f
        if self.atoms is not None and len(self.atoms) != f.shape[0]:
            raise InvalidInputError("atom records and frames differ in count")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def n_residues(self) -> int:
        return self.frames.shape[1]

    def subsample(self, stride: int) -> "Ensemble":
        atoms = None if self.atoms is None else self.atoms[::stride]
        return dataclasses.replace(self, frames=self.frames[::stride], atoms=atoms)


def _need_frames(e: Ensemble, k: int, what: str) -> None:
    if len(e) < k:
        raise UndefinedMetricError(f"{what} needs at least {k} frames, got {len(e)}")


def _transform_atoms(atoms: list[AtomRecord], rot: np.ndarray, trans: np.ndarray) -> list[AtomRecord]:
    if not atoms:
        return atoms
    xyz = np.array([a.position for a in atoms]) @ rot.T + trans
    return [dataclasses.replace(a, position=tuple(p)) for a, p in zip(atoms, xyz.tolist())]


def mean_pairwise_rmsd(e: Ensemble, max_pairs: int = 5000, seed: int = 0) -> float:
    _need_frames(e, 2, "pairwise RMSD")
    m = len(e)
    i, j = np.triu_indices(m, k=1)
    if len(i) > max_pairs:
        pick = np.random.default_rng(seed).choice(len(i), size=max_pairs, replace=False)
        i, j = i[pick], j[pick]
    vals = [kabsch_align(e.frames[a], e.frames[b]).rmsd for a, b in zip(i, j)]
    return float(np.mean(vals))


def _superpose_all(frames: np.ndarray, reference: np.ndarray):
    """Kabsch-superpose every frame onto ``reference``; returns frames and transforms."""
    ref_mean = reference.mean(axis=0)
    ref_c = reference - ref_mean
    out = np.empty_like(frames)
    transforms = []
    for k, f in enumerate(frames):
        f_mean = f.mean(axis=0)
        rot = kabsch_rotation(f - f_mean, ref_c)
        out[k] = (f - f_mean) @ rot.T + ref_mean
        transforms.append((rot, ref_mean - rot @ f_mean))
    return out, transforms


def align_ensemble(e: Ensemble, tol: float = 1e-6, max_iter: int = 10) -> Ensemble:
    """Iterative superposition onto the ensemble mean.

    Frames are first fitted to frame 0, then repeatedly to the running mean.
    After each pass the mean is re-fitted onto the input frame 0 so the global
    pose stays fixed; an already aligned ensemble is a fixed point.
    """
    frames0 = e.frames
    anchor = frames0[0]
    aligned, _ = _superpose_all(frames0, anchor)
    mean = aligned.mean(axis=0)
    for _ in range(max_iter):
        aligned, _ = _superpose_all(frames0, mean)
        new_mean = kabsch_align(aligned.mean(axis=0), anchor).aligned
        shift = np.max(np.linalg.norm(new_mean - mean, axis=1))
        mean = new_mean
        if shift < tol:
            break
    aligned, transforms = _superpose_all(frames0, mean)
    atoms = None
    if e.atoms is not None:
        atoms = [_transform_atoms(a, r, t) for a, (r, t) in zip(e.atoms, transforms)]
    return dataclasses.replace(e, frames=aligned, atoms=atoms)


def rmsf(e: Ensemble) -> np.ndarray:
    """Per-residue fluctuation about the mean position. Expects aligned frames."""
    _need_frames(e, 2, "RMSF")
    dev = e.frames - e.frames.mean(axis=0)
    return np.sqrt(np.mean(np.sum(dev * dev, axis=-1), axis=0))


def jsd(p, q) -> float:
    """Base-2 Jensen-Shannon divergence between two (unnormalized) histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise InvalidInputError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise InvalidInputError("histograms must be non-negative")
    if p.sum() == 0 or q.sum() == 0:
        raise UndefinedMetricError("JSD of an empty histogram")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return np.sum(a[nz] * np.log2(a[nz] / m[nz]))

    val = 0.5 * kl(p) + 0.5 * kl(q)
    return float(min(max(val, 0.0), 1.0))


def _features(ref: Ensemble, pred: Ensemble, featurization: str):
    if featurization == "coords":
        pooled = Ensemble(np.concatenate([ref.frames, pred.frames]))
        aligned = align_ensemble(pooled).frames
        flat = aligned.reshape(len(aligned), -1)
    elif featurization == "pairdist":
        iu = np.triu_indices(ref.n_residues, k=1)
        flat = np.array([pairwise_distances(f)[iu] for f in np.concatenate([ref.frames, pred.frames])])
    else:
        raise InvalidInputError(f"unknown featurization {featurization!r}")
    return flat[: len(ref)], flat[len(ref):]


@dataclass
class PcaComparison:
    jsd_per_pc: list[float]
    mean_jsd: float
    components: np.ndarray
    explained_variance: np.ndarray
    reference_projection: np.ndarray
    predicted_projection: np.ndarray


def pca_compare(reference: Ensemble, predicted: Ensemble, featurization: str = "coords",
                n_components: int = 2, n_bins: int = 50) -> PcaComparison:
    """Compare ensembles by histogramming their projections on pooled principal components."""
    if reference.n_residues != predicted.n_residues:
        raise InvalidInputError("ensembles have different chain lengths")
    _need_frames(reference, 2, "PCA")
    _need_frames(predicted, 2, "PCA")
    fr, fp = _features(reference, predicted, featurization)
    pooled = np.concatenate([fr, fp])
    center = pooled.mean(axis=0)
    _, s, vt = np.linalg.svd(pooled - center, full_matrices=False)
    var = s**2 / max(len(pooled) - 1, 1)
    scale = max(1.0, float(np.max(np.abs(pooled))))
    if len(var) < n_components or np.any(var[:n_components] <= (1e-12 * scale) ** 2):
        raise UndefinedMetricError("pooled data has zero variance along a requested component")
    comps = vt[:n_components]
    pr = (fr - center) @ comps.T
    pp = (fp - center) @ comps.T
    values = []
    for k in range(n_components):
        lo = min(pr[:, k].min(), pp[:, k].min())
        hi = max(pr[:, k].max(), pp[:, k].max())
        hr, _ = np.histogram(pr[:, k], bins=n_bins, range=(lo, hi))
        hp, _ = np.histogram(pp[:, k], bins=n_bins, range=(lo, hi))
        values.append(jsd(hr, hp))
    return PcaComparison(values, float(np.mean(values)), comps, var[:n_components], pr, pp)


def stable_contacts(e: Ensemble, threshold: float = 7.0, persistence: float = 0.85,
                    min_sep: int = 3) -> set[tuple[int, int]]:
    """Residue pairs in contact in strictly more than ``persistence`` of the frames."""
    _need_frames(e, 1, "stable contacts")
    n = e.n_residues
    diff = e.frames[:, :, None, :] - e.frames[:, None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    freq = np.mean(d < threshold, axis=0)
    i, j = np.triu_indices(n, k=max(min_sep, 1))
    keep = freq[i, j] > persistence
    return set(zip(i[keep].tolist(), j[keep].tolist()))


def jaccard(a: set, b: set) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def circular_bin(angles_deg: np.ndarray, n_bins: int = 36) -> np.ndarray:
    """Bins over (-180, 180]: bin k covers (-180 + k*w, -180 + (k+1)*w]."""
    w = 360.0 / n_bins
    idx = np.ceil((np.asarray(angles_deg) + 180.0) / w).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def _torsion_stack(e: Ensemble) -> np.ndarray:
    if e.atoms is None:
        raise UndefinedMetricError(f"ensemble {e.target_id!r} carries no atom records")
    return np.stack([compute_torsions(a).degrees() for a in e.atoms])


def dihedral_jsd(reference: Ensemble, predicted: Ensemble, n_bins: int = 36) -> float:
    ref = _torsion_stack(reference)
    pred = _torsion_stack(predicted)
    if ref.shape[1:] != pred.shape[1:]:
        raise InvalidInputError("ensembles have different residue counts")
    values = []
    for i in range(ref.shape[1]):
        for k in range(3):
            a = ref[:, i, k]
            b = pred[:, i, k]
            a = a[~np.isnan(a)]
            b = b[~np.isnan(b)]
            if len(a) == 0 or len(b) == 0:
                continue
            ha = np.bincount(circular_bin(a, n_bins), minlength=n_bins)
            hb = np.bincount(circular_bin(b, n_bins), minlength=n_bins)
            values.append(jsd(ha, hb))
    if not values:
        raise UndefinedMetricError("no dihedral angle is defined in both ensembles")
    return float(np.mean(values))


def dccm(e: Ensemble) -> np.ndarray:
    """Dynamic cross-correlation of per-residue displacements (expects aligned frames).

    Residues that never move get a zero row/column and a unit diagonal.
    """
    _need_frames(e, 2, "DCCM")
    dev = e.frames - e.frames.mean(axis=0)
    cov = np.einsum("fid,fjd->ij", dev, dev) / len(e)
    var = np.diag(cov).copy()
    moving = var > 0
    norm = np.sqrt(np.where(moving, var, 1.0))
    c = cov / np.outer(norm, norm)
    c[~moving, :] = 0.0
    c[:, ~moving] = 0.0
    np.fill_diagonal(c, 1.0)
    return np.clip(c, -1.0, 1.0)


def zero_fluctuation_residues(e: Ensemble) -> list[int]:
    dev = e.frames - e.frames.mean(axis=0)
    return np.nonzero(np.sum(dev * dev, axis=(0, 2)) == 0)[0].tolist()


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or len(a) < 2:
        raise InvalidInputError("pearson needs two equal-length vectors of length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.sum(da * da))
    sb = np.sqrt(np.sum(db * db))
    if sa == 0 or sb == 0:
        raise UndefinedMetricError("pearson correlation with zero variance")
    r = float(np.sum(da * db) / (sa * sb))
    return min(1.0, max(-1.0, r))


@dataclass
class EvalConfig:
    max_pairs: int = 5000
    seed: int = 0
    contact_threshold: float = 7.0
    persistence: float = 0.85
    min_sep: int = 3
    pca_bins: int = 50
    pca_components: int = 2
    dihedral_bins: int = 36
    residue_range: tuple[int, int] | None = None


#: Scalar report fields in the row order of the published results table.
TABLE_FIELDS = (
    "pairwise_rmsd",
    "pairwise_rmsd_ref",
    "pairwise_rmsd_ratio",
    "pca_jsd_coords",
    "pca_jsd_pairdist",
    "rmsf_mean",
    "rmsf_mean_ref",
    "rmsf_pearson",
    "contact_jaccard",
    "dihedral_jsd",
    "dccm_pearson",
)


@dataclass
class MetricReport:
    target_id: str
    pairwise_rmsd: float | None = None
    pairwise_rmsd_ref: float | None = None
    pairwise_rmsd_ratio: float | None = None
    pca_jsd_coords: float | None = None
    pca_jsd_pairdist: float | None = None
    rmsf_mean: float | None = None
    rmsf_mean_ref: float | None = None
    rmsf_pearson: float | None = None
    contact_jaccard: float | None = None
    dihedral_jsd: float | None = None
    dccm_pearson: float | None = None
    rmsf_profile: list[float] = field(default_factory=list)
    rmsf_profile_ref: list[float] = field(default_factory=list)
    zero_fluctuation_residues: list[int] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    def scalars(self) -> dict[str, float | None]:
        return {k: getattr(self, k) for k in TABLE_FIELDS}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        # The contacts row is labelled "stable contacts" in published tables.
        d["stable_contacts"] = self.contact_jaccard
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _slice_residues(e: Ensemble, rng: tuple[int, int] | None) -> Ensemble:
    if rng is None:
        return e
    lo, hi = rng
    return dataclasses.replace(e, frames=e.frames[:, lo:hi], atoms=None)


def evaluate_target(reference: Ensemble, predicted: Ensemble,
                    config: EvalConfig | None = None) -> MetricReport:
    """Fill every report field; a failing metric records its error and leaves the rest intact."""
    cfg = config or EvalConfig()
    if reference.n_residues != predicted.n_residues:
        raise InvalidInputError("reference and predicted chain lengths differ")
    rep = MetricReport(target_id=reference.target_id)

    def attempt(name, fn):
        try:
            return fn()
        except UndefinedMetricError as exc:
            rep.errors[name] = str(exc)
            return None

    rep.pairwise_rmsd = attempt("pairwise_rmsd",
                                lambda: mean_pairwise_rmsd(predicted, cfg.max_pairs, cfg.seed))
    rep.pairwise_rmsd_ref = attempt("pairwise_rmsd_ref",
                                    lambda: mean_pairwise_rmsd(reference, cfg.max_pairs, cfg.seed))
    if rep.pairwise_rmsd is not None and rep.pairwise_rmsd_ref:
        rep.pairwise_rmsd_ratio = rep.pairwise_rmsd / rep.pairwise_rmsd_ref
    elif rep.pairwise_rmsd_ref == 0.0 and rep.pairwise_rmsd == 0.0:
        rep.pairwise_rmsd_ratio = 1.0

    rep.pca_jsd_coords = attempt("pca_jsd_coords", lambda: pca_compare(
        reference, predicted, "coords", cfg.pca_components, cfg.pca_bins).mean_jsd)
    rep.pca_jsd_pairdist = attempt("pca_jsd_pairdist", lambda: pca_compare(
        reference, predicted, "pairdist", cfg.pca_components, cfg.pca_bins).mean_jsd)

    ref_al = _slice_residues(align_ensemble(reference), cfg.residue_range)
    pred_al = _slice_residues(align_ensemble(predicted), cfg.residue_range)
    prof_ref = attempt("rmsf_mean_ref", lambda: rmsf(ref_al))
    prof = attempt("rmsf_mean", lambda: rmsf(pred_al))
    if prof is not None:
        rep.rmsf_profile = prof.tolist()
        rep.rmsf_mean = float(prof.mean())
    if prof_ref is not None:
        rep.rmsf_profile_ref = prof_ref.tolist()
        rep.rmsf_mean_ref = float(prof_ref.mean())
    if prof is not None and prof_ref is not None:
        rep.rmsf_pearson = attempt("rmsf_pearson", lambda: pearson(prof, prof_ref))

    rep.contact_jaccard = jaccard(
        stable_contacts(reference, cfg.contact_threshold, cfg.persistence, cfg.min_sep),
        stable_contacts(predicted, cfg.contact_threshold, cfg.persistence, cfg.min_sep))

    rep.dihedral_jsd = attempt("dihedral_jsd",
                               lambda: dihedral_jsd(reference, predicted, cfg.dihedral_bins))

    def dccm_corr():
        a = dccm(ref_al)
        b = dccm(pred_al)
        iu = np.triu_indices(a.shape[0], k=1)
        return pearson(a[iu], b[iu])

    rep.dccm_pearson = attempt("dccm_pearson", dccm_corr)
    rep.zero_fluctuation_residues = sorted(
        set(zero_fluctuation_residues(ref_al)) | set(zero_fluctuation_residues(pred_al)))
    return rep


def lower_median(values: Sequence[float]) -> float:
    s = sorted(values)
    return s[(len(s) - 1) // 2]


@dataclass
class AggregateReport:
    n_targets: int
    medians: dict[str, float | None]
    pairwise_rmsd_pearson: float | None

    def to_dict(self) -> dict:
        d = {"n_targets": self.n_targets, **self.medians,
             "pairwise_rmsd_pearson": self.pairwise_rmsd_pearson}
        d["stable_contacts"] = self.medians.get("contact_jaccard")
        return d


def aggregate(reports: Sequence[MetricReport]) -> AggregateReport:
    """Per-field lower median across targets plus the cross-target pairwise-RMSD correlation."""
    if not reports:
        raise InvalidInputError("aggregate needs at least one report")
    medians: dict[str, float | None] = {}
    for name in TABLE_FIELDS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        medians[name] = lower_median(vals) if vals else None
    pairs = [(r.pairwise_rmsd, r.pairwise_rmsd_ref) for r in reports
             if r.pairwise_rmsd is not None and r.pairwise_rmsd_ref is not None]
    corr = None
    if len(pairs) >= 2:
        try:
            corr = pearson([p for p, _ in pairs], [q for _, q in pairs])
        except UndefinedMetricError:
            corr = None
    return AggregateReport(len(reports), medians, corr)
