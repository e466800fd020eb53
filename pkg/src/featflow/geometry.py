"""Structural math: distances, binning, superposition, torsions and contacts.

Coordinates are plain ``(n, 3)`` float64 arrays in Angstrom. Everything here
is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from featflow.errors import InvalidInputError

#: Distance binning used by the input embedder.
DIST_MIN = 3.25
DIST_MAX = 50.75
DIST_BINS = 39

ANGLE_NAMES = ("phi", "psi", "chi1")

#: Side-chain atom closing the chi1 dihedral N-CA-CB-X. Residues missing here
#: default to CG; GLY and ALA have no chi1.
CHI1_GAMMA_ATOM = {
    "VAL": "CG1",
    "ILE": "CG1",
    "SER": "OG",
    "THR": "OG1",
    "CYS": "SG",
}
NO_CHI1 = frozenset({"GLY", "ALA"})


def gamma_atom(residue_name: str) -> str | None:
    if residue_name in NO_CHI1:
        return None
    return CHI1_GAMMA_ATOM.get(residue_name, "CG")


def as_coords(x, name: str = "coords") -> np.ndarray:
    """Validate and return an ``(n, 3)`` float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise InvalidInputError(f"{name} must have shape (n, 3) with n >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


@dataclass(frozen=True)
class AtomRecord:
    residue_index: int
    residue_name: str
    atom_name: str
    position: tuple[float, float, float]

    @property
    def xyz(self) -> np.ndarray:
        return np.asarray(self.position, dtype=np.float64)


@dataclass
class TorsionFeatures:
    """Per-residue (phi, psi, chi1) stored as (sin, cos) pairs.

    ``values`` has shape ``(n, 3, 2)``; ``mask`` has shape ``(n, 3)``. Masked
    entries are exactly ``(0, 0)``.
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape[1:] != (3, 2) or self.mask.shape != self.values.shape[:2]:
            raise InvalidInputError(
                f"torsion shapes inconsistent: values {self.values.shape}, mask {self.mask.shape}"
            )
        self.values = np.where(self.mask[..., None], self.values, 0.0)

    @classmethod
    def from_angles(cls, angles: np.ndarray, mask: np.ndarray) -> "TorsionFeatures":
        """Build from angles in radians, shape ``(n, 3)``; NaNs are ignored where masked."""
        angles = np.asarray(angles, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        safe = np.where(mask, angles, 0.0)
        values = np.stack([np.sin(safe), np.cos(safe)], axis=-1)
        return cls(values, mask)

    def __len__(self) -> int:
        return self.values.shape[0]

    def angles(self) -> np.ndarray:
        """Angles in radians in (-pi, pi]; NaN where masked."""
        ang = np.arctan2(self.values[..., 0], self.values[..., 1])
        ang = np.where(ang <= -np.pi, np.pi, ang)
        return np.where(self.mask, ang, np.nan)

    def degrees(self) -> np.ndarray:
        return np.degrees(self.angles())

    def as_input(self) -> np.ndarray:
        """Flat ``(n, 9)`` embedding input: sin/cos of each angle then the mask."""
        n = len(self)
        return np.concatenate([self.values.reshape(n, 6), self.mask.astype(np.float64)], axis=1)


@dataclass
class ContactMap:
    matrix: np.ndarray
    threshold: float
    min_sequence_separation: int

    def pairs(self) -> set[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.matrix))
        return set(zip(i.tolist(), j.tolist()))


def pairwise_distances(c) -> np.ndarray:
    x = as_coords(c)
    diff = x[:, None, :] - x[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def bin_distances(
    d, min: float = DIST_MIN, max: float = DIST_MAX, n_bins: int = DIST_BINS
) -> np.ndarray:
    """Equal-width bin indices over ``[min, max)``, clamped at both ends."""
    if not min < max:
        raise InvalidInputError("bin_distances requires min < max")
    if n_bins < 2:
        raise InvalidInputError("bin_distances requires n_bins >= 2")
    d = np.asarray(d, dtype=np.float64)
    width = (max - min) / n_bins
    idx = np.floor((d - min) / width)
    return np.clip(idx, 0, n_bins - 1).astype(np.int64)


@dataclass
class Alignment:
    rotation: np.ndarray
    translation: np.ndarray
    aligned: np.ndarray
    rmsd: float


def kabsch_rotation(mobile_centered: np.ndarray, reference_centered: np.ndarray) -> np.ndarray:
    """Proper rotation R minimizing sum ||R m_i - r_i||^2 for centered point sets."""
    h = mobile_centered.T @ reference_centered
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    return vt.T @ np.diag([1.0, 1.0, d]) @ u.T


def kabsch_align(mobile, reference) -> Alignment:
    """Superimpose ``mobile`` onto ``reference``.

    Returns the rotation ``R`` and translation ``t`` with
    ``aligned = mobile @ R.T + t`` together with the post-fit RMSD.
    """
    m = as_coords(mobile, "mobile")
    r = as_coords(reference, "reference")
    _same_length(m, r)
    m_mean = m.mean(axis=0)
    r_mean = r.mean(axis=0)
    rot = kabsch_rotation(m - m_mean, r - r_mean)
    translation = r_mean - rot @ m_mean
    aligned = (m - m_mean) @ rot.T + r_mean
    return Alignment(rot, translation, aligned, rmsd(aligned, r))


def rmsd(a, b) -> float:
    a = as_coords(a, "a")
    b = as_coords(b, "b")
    _same_length(a, b)
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def dihedral(p0, p1, p2, p3) -> float:
    """IUPAC dihedral angle in radians, range (-pi, pi]."""
    p0, p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p0, p1, p2, p3))
    b1 = p1 - p0
    b2 = p2 - p1
    b3 = p3 - p2
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    y = np.linalg.norm(b2) * np.dot(b1, n2)
    x = np.dot(n1, n2)
    ang = float(np.arctan2(y, x))
    return np.pi if ang <= -np.pi else ang


def group_residues(atoms: Iterable[AtomRecord]) -> list[tuple[int, str, dict[str, np.ndarray]]]:
    """Group atoms into ``(residue_index, residue_name, {atom_name: xyz})`` in order of appearance."""
    out: list[tuple[int, str, dict[str, np.ndarray]]] = []
    index: dict[int, int] = {}
    for a in atoms:
        k = index.get(a.residue_index)
        if k is None:
            index[a.residue_index] = len(out)
            out.append((a.residue_index, a.residue_name, {}))
            k = len(out) - 1
        out[k][2][a.atom_name] = a.xyz
    return out


def compute_torsions(conformation: Sequence[AtomRecord]) -> TorsionFeatures:
    """phi/psi/chi1 for every residue; undefined angles are masked.

    phi and psi need the neighbouring residue to carry the consecutive
    residue number; a gap in numbering is treated as a chain break.
    """
    residues = group_residues(conformation)
    n = len(residues)
    angles = np.zeros((n, 3))
    mask = np.zeros((n, 3), dtype=bool)
    for k, (resi, resn, at) in enumerate(residues):
        prev = residues[k - 1] if k > 0 and residues[k - 1][0] == resi - 1 else None
        nxt = residues[k + 1] if k + 1 < n and residues[k + 1][0] == resi + 1 else None
        if prev is not None and all(name in at for name in ("N", "CA", "C")) and "C" in prev[2]:
            angles[k, 0] = dihedral(prev[2]["C"], at["N"], at["CA"], at["C"])
            mask[k, 0] = True
        if nxt is not None and all(name in at for name in ("N", "CA", "C")) and "N" in nxt[2]:
            angles[k, 1] = dihedral(at["N"], at["CA"], at["C"], nxt[2]["N"])
            mask[k, 1] = True
        g = gamma_atom(resn)
        if g is not None and all(name in at for name in ("N", "CA", "CB", g)):
            angles[k, 2] = dihedral(at["N"], at["CA"], at["CB"], at[g])
            mask[k, 2] = True
    return TorsionFeatures.from_angles(angles, mask)


def contact_map(c, threshold: float = 7.0, min_sep: int = 3) -> ContactMap:
    if threshold <= 0:
        raise InvalidInputError("contact threshold must be positive")
    d = pairwise_distances(c)
    n = d.shape[0]
    sep = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
    m = (d < threshold) & (sep >= max(min_sep, 1))
    return ContactMap(m, float(threshold), int(min_sep))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed proper rotation (QR of a Gaussian matrix)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
