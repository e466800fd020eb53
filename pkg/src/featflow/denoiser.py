"""Denoisers mapping conditioning features to a predicted clean structure."""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import nn

from featflow.errors import InvalidInputError
from featflow.features import make_linear
from featflow.geometry import (
    AtomRecord,
    TorsionFeatures,
    as_coords,
    gamma_atom,
    kabsch_align,
)

THREE_LETTER = {
    "A": "ALA", "C": "CYS", "D": "ASP", "E": "GLU", "F": "PHE", "G": "GLY", "H": "HIS",
    "I": "ILE", "K": "LYS", "L": "LEU", "M": "MET", "N": "ASN", "P": "PRO", "Q": "GLN",
    "R": "ARG", "S": "SER", "T": "THR", "V": "VAL", "W": "TRP", "Y": "TYR",
}
ONE_LETTER = {v: k for k, v in THREE_LETTER.items()}

# Ideal backbone geometry (A, degrees).
N_CA = 1.458
CA_C = 1.525
C_N = 1.329
ANGLE_N_CA_C = 111.2
ANGLE_CA_C_N = 116.2
ANGLE_C_N_CA = 121.7
OMEGA = 180.0
CB_GAMMA = 1.52
ANGLE_CA_CB_G = 114.0
EXTENDED_PHI = -180.0
EXTENDED_PSI = 180.0


@dataclass
class DenoiserOutput:
    coords: np.ndarray
    torsions: TorsionFeatures | None = None


class Denoiser(Protocol):
    def denoise(self, single: torch.Tensor, pair: torch.Tensor, sequence: str) -> DenoiserOutput: ...


def oracle_denoise(single, pair, target, sequence: str | None = None) -> np.ndarray:
    target = as_coords(target, "target")
    if sequence is not None and len(sequence) != target.shape[0]:
        raise InvalidInputError(f"target has {target.shape[0]} residues, sequence has {len(sequence)}")
    return target


class OracleDenoiser:
    """Test double returning stored targets, cycling through them call by call."""

    def __init__(self, targets):
        arr = np.asarray(targets, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        self.targets = [as_coords(t, "target") for t in arr]
        self._cycle = itertools.cycle(range(len(self.targets)))
        self.calls = 0

    def denoise(self, single, pair, sequence: str) -> DenoiserOutput:
        self.calls += 1
        target = self.targets[next(self._cycle)]
        return DenoiserOutput(oracle_denoise(single, pair, target, sequence).copy())


class ToyDenoiser(nn.Module):
    """A small structure module that builds coordinates purely from features.

    Residues start at the origin. Each round runs single-head attention over
    residues (logits from single-feature queries/keys plus a pair bias),
    updates the residue state from attended single and pair values, and adds
    a per-residue 3D displacement. A final head emits (sin, cos) for
    phi/psi/chi1, normalized to unit length.
    """

    def __init__(self, c_s: int = 64, c_z: int = 64, width: int = 32, n_rounds: int = 4):
        super().__init__()
        self.c_s, self.c_z, self.width, self.n_rounds = c_s, c_z, width, n_rounds
        self.single_norm = nn.LayerNorm(c_s)
        self.pair_norm = nn.LayerNorm(c_z)
        self.single_in = make_linear(c_s, width)
        # pair bias (1) and pair values (width) for every round in one projection
        self.pair_proj = make_linear(c_z, n_rounds * (width + 1), bias=False)
        self.rounds = nn.ModuleList(_Round(width) for _ in range(n_rounds))
        self.torsion_head = make_linear(width, 6)
        self.register_buffer("torsion_offset", torch.tensor([0.0, 1.0] * 3))

    def forward(self, single: torch.Tensor, pair: torch.Tensor):
        """Return coordinates ``(..., n, 3)`` and torsions ``(..., n, 3, 2)``."""
        if single.shape[-1] != self.c_s or pair.shape[-1] != self.c_z:
            raise InvalidInputError(
                f"expected channels ({self.c_s}, {self.c_z}), got ({single.shape[-1]}, {pair.shape[-1]})")
        if pair.shape[-3] != single.shape[-2] or pair.shape[-2] != single.shape[-2]:
            raise InvalidInputError("single and pair residue counts disagree")
        h = self.single_in(self.single_norm(single))
        proj = self.pair_proj(self.pair_norm(pair)).unflatten(-1, (self.n_rounds, self.width + 1))
        x = torch.zeros(*h.shape[:-1], 3, dtype=h.dtype)
        for r, rnd in enumerate(self.rounds):
            h, dx = rnd(h, proj[..., r, 0], proj[..., r, 1:])
            x = x + dx
        raw = (self.torsion_head(h) + self.torsion_offset).unflatten(-1, (3, 2))
        tor = raw / torch.sqrt((raw * raw).sum(-1, keepdim=True)).clamp_min(1e-12)
        return x, tor

    def denoise(self, single, pair, sequence: str) -> DenoiserOutput:
        with torch.no_grad():
            x, tor = self.forward(single.to(self.single_in.weight.dtype),
                                  pair.to(self.single_in.weight.dtype))
        x = x.double().numpy()
        if x.shape[0] != len(sequence):
            raise InvalidInputError("denoiser output length differs from sequence length")
        return DenoiserOutput(x, torsions_from_head(tor.double().numpy(), sequence))


class _Round(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.qkv = make_linear(width, 3 * width, bias=False)
        self.out = make_linear(2 * width, width)
        self.mlp_norm = nn.LayerNorm(width)
        self.mlp_up = make_linear(width, 2 * width)
        self.mlp_down = make_linear(2 * width, width)
        self.displacement = make_linear(width, 3)

    def forward(self, h: torch.Tensor, pair_bias: torch.Tensor, pair_value: torch.Tensor):
        hn = self.norm(h)
        q, k, v = self.qkv(hn).chunk(3, dim=-1)
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]) + pair_bias
        a = torch.softmax(logits, dim=-1)
        o_single = a @ v
        o_pair = (a.unsqueeze(-2) @ pair_value).squeeze(-2)
        h = h + self.out(torch.cat([o_single, o_pair], dim=-1))
        h = h + self.mlp_down(torch.relu(self.mlp_up(self.mlp_norm(h))))
        return h, self.displacement(h)


@functools.lru_cache(maxsize=64)
def _torsion_mask(sequence: str) -> np.ndarray:
    n = len(sequence)
    mask = np.ones((n, 3), dtype=bool)
    mask[0, 0] = False
    mask[n - 1, 1] = False
    for i, aa in enumerate(sequence):
        if gamma_atom(THREE_LETTER.get(aa.upper(), "UNK")) is None:
            mask[i, 2] = False
    mask.setflags(write=False)
    return mask


def torsions_from_head(tor: np.ndarray, sequence: str) -> TorsionFeatures:
    """Wrap head output as TorsionFeatures, masking chain-end phi/psi and absent chi1."""
    if tor.shape[0] != len(sequence):
        raise InvalidInputError("torsion head output length differs from sequence length")
    return TorsionFeatures(tor, _torsion_mask(sequence).copy())


def toy_denoise(single, pair, params: ToyDenoiser):
    with torch.no_grad():
        return params(single, pair)


def _place(a: np.ndarray, b: np.ndarray, c: np.ndarray, bond: float, angle_deg: float,
           torsion_deg: float) -> np.ndarray:
    """NeRF: position of d with |cd| = bond, angle bcd and dihedral abcd."""
    angle = math.radians(angle_deg)
    torsion = math.radians(torsion_deg)
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array([-bond * math.cos(angle),
                   bond * math.sin(angle) * math.cos(torsion),
                   bond * math.sin(angle) * math.sin(torsion)])
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


def _ideal_cb(n: np.ndarray, ca: np.ndarray, c: np.ndarray) -> np.ndarray:
    b = ca - n
    cc = c - ca
    a = np.cross(b, cc)
    return -0.58273431 * a + 0.56802827 * b - 0.54067466 * cc + ca


def reconstruct_backbone(coords, torsions: TorsionFeatures, sequence: str | None = None,
                         first_residue: int = 1) -> list[AtomRecord]:
    """Build N/CA/C (plus CB and the chi1 gamma atom) from phi/psi/chi1.

    The chain is grown with ideal geometry, then rigidly superposed so that its
    CB atoms (CA for glycine) best match ``coords``.
    """
    coords = as_coords(coords)
    n = coords.shape[0]
    if len(torsions) != n:
        raise InvalidInputError("torsions and coordinates differ in length")
    if sequence is None:
        sequence = "A" * n
    deg = torsions.degrees()
    phi = np.where(np.isnan(deg[:, 0]), EXTENDED_PHI, deg[:, 0])
    psi = np.where(np.isnan(deg[:, 1]), EXTENDED_PSI, deg[:, 1])

    ang = math.radians(ANGLE_N_CA_C)
    N = [np.zeros(3)]
    CA = [np.array([N_CA, 0.0, 0.0])]
    C = [CA[0] + CA_C * np.array([-math.cos(ang), math.sin(ang), 0.0])]
    for i in range(1, n):
        N.append(_place(N[i - 1], CA[i - 1], C[i - 1], C_N, ANGLE_CA_C_N, psi[i - 1]))
        CA.append(_place(CA[i - 1], C[i - 1], N[i], N_CA, ANGLE_C_N_CA, OMEGA))
        C.append(_place(C[i - 1], N[i], CA[i], CA_C, ANGLE_N_CA_C, phi[i]))

    residues = []
    for i in range(n):
        resn = THREE_LETTER.get(sequence[i].upper(), "UNK")
        atoms = {"N": N[i], "CA": CA[i], "C": C[i]}
        if resn != "GLY":
            atoms["CB"] = _ideal_cb(N[i], CA[i], C[i])
            g = gamma_atom(resn)
            if g is not None and torsions.mask[i, 2]:
                atoms[g] = _place(N[i], CA[i], atoms["CB"], CB_GAMMA, ANGLE_CA_CB_G, deg[i, 2])
        residues.append((resn, atoms))

    flow_atoms = np.array([a.get("CB", a["CA"]) for _, a in residues])
    fit = kabsch_align(flow_atoms, coords)
    out = []
    for i, (resn, atoms) in enumerate(residues):
        for name, pos in atoms.items():
            p = fit.rotation @ pos + fit.translation
            out.append(AtomRecord(first_residue + i, resn, name, tuple(float(v) for v in p)))
    return out


def sequence_from_atoms(atoms: Sequence[AtomRecord]) -> str:
    seen: dict[int, str] = {}
    for a in atoms:
        seen.setdefault(a.residue_index, a.residue_name)
    return "".join(ONE_LETTER.get(r, "X") for r in seen.values())
