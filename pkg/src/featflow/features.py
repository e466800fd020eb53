"""Input embedding of noisy structures and the conditioning feature providers.

The pair pathway turns binned inter-residue distances into a 64-channel pair
representation refined by triangle updates; every branch that feeds the
conditioning sum ends in a zero-initialized linear layer so that a freshly
built embedder leaves provider features untouched.
"""

from __future__ import annotations

import math
from typing import Protocol

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from featflow.errors import InvalidInputError
from featflow.geometry import DIST_BINS, DIST_MAX, DIST_MIN

TIME_EMBED_DIM = 128
TIME_EMBED_SEED = 2024
TORSION_INPUT_DIM = 9
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"


def make_linear(c_in: int, c_out: int, bias: bool = True, init: str = "default") -> nn.Linear:
    """``nn.Linear`` with the AlphaFold-style ``final`` (all zero) or ``gating`` init."""
    lin = nn.Linear(c_in, c_out, bias=bias)
    if init == "final":
        nn.init.zeros_(lin.weight)
        if bias:
            nn.init.zeros_(lin.bias)
    elif init == "gating":
        nn.init.zeros_(lin.weight)
        if bias:
            nn.init.ones_(lin.bias)
    elif init != "default":
        raise ValueError(f"unknown init {init!r}")
    return lin


def randomize_parameters(module: nn.Module, seed: int, scale: float = 1.0) -> nn.Module:
    """Overwrite every parameter with seeded Gaussian noise (fan-in scaled for matrices)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            fan_in = p.shape[-1] if p.dim() > 1 else 1
            noise = torch.randn(p.shape, generator=gen, dtype=torch.float64)
            p.copy_((noise * scale / math.sqrt(fan_in)).to(p.dtype))
    return module


def _check_channels(z: torch.Tensor, c: int, what: str) -> None:
    if z.dim() < 3 or z.shape[-1] != c or z.shape[-2] != z.shape[-3]:
        raise InvalidInputError(f"{what} expects (..., n, n, {c}) input, got {tuple(z.shape)}")


class TriangleAttention(nn.Module):
    """Gated multi-head attention along rows of the pair representation.

    ``starting=True`` attends over k for each edge (i, j) using keys from
    (i, k) and a bias from the third edge (j, k). The ending-node variant is
    the same computation on the transposed pair representation.
    """

    def __init__(self, c_z: int = 64, c_hidden: int = 16, n_heads: int = 4,
                 starting: bool = True, chunk_elements: int = 1 << 23):
        super().__init__()
        self.c_z, self.c_hidden, self.n_heads = c_z, c_hidden, n_heads
        self.starting = starting
        self.chunk_elements = chunk_elements
        hc = c_hidden * n_heads
        self.norm = nn.LayerNorm(c_z)
        self.to_q = make_linear(c_z, hc, bias=False)
        self.to_k = make_linear(c_z, hc, bias=False)
        self.to_v = make_linear(c_z, hc, bias=False)
        self.to_bias = make_linear(c_z, n_heads, bias=False)
        self.to_gate = make_linear(c_z, hc, init="gating")
        self.to_out = make_linear(hc, c_z)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_channels(z, self.c_z, "triangle attention")
        if not self.starting:
            z = z.transpose(-2, -3)
        z = self.norm(z)
        n = z.shape[-2]
        h, c = self.n_heads, self.c_hidden
        lead = z.shape[:-3]
        # (..., i, h, j, c) so each (i, h) row is one attention problem
        q = self.to_q(z).view(*lead, n, n, h, c).transpose(-2, -3)
        k = self.to_k(z).view(*lead, n, n, h, c).transpose(-2, -3)
        v = self.to_v(z).view(*lead, n, n, h, c).transpose(-2, -3)
        bias = self.to_bias(z).movedim(-1, -3).unsqueeze(-4)  # (..., 1, h, j, k)

        rows = max(1, self.chunk_elements // max(1, h * n * n))
        outs = []
        for start in range(0, n, rows):
            sl = slice(start, start + rows)
            outs.append(F.scaled_dot_product_attention(
                q[..., sl, :, :, :], k[..., sl, :, :, :], v[..., sl, :, :, :], attn_mask=bias))
        o = torch.cat(outs, dim=-4) if len(outs) > 1 else outs[0]
        o = o.transpose(-2, -3).reshape(*lead, n, n, h * c)
        o = torch.sigmoid(self.to_gate(z)) * o
        out = self.to_out(o)
        if not self.starting:
            out = out.transpose(-2, -3)
        return out


class TriangleMultiplication(nn.Module):
    """Outgoing: x_ij = sum_k a_ik * b_jk.  Incoming: x_ij = sum_k a_ki * b_kj."""

    def __init__(self, c_z: int = 64, c_hidden: int = 64, outgoing: bool = True):
        super().__init__()
        self.c_z = c_z
        self.outgoing = outgoing
        self.norm_in = nn.LayerNorm(c_z)
        self.a_proj = make_linear(c_z, c_hidden)
        self.a_gate = make_linear(c_z, c_hidden, init="gating")
        self.b_proj = make_linear(c_z, c_hidden)
        self.b_gate = make_linear(c_z, c_hidden, init="gating")
        self.norm_out = nn.LayerNorm(c_hidden)
        self.out_proj = make_linear(c_hidden, c_z)
        self.out_gate = make_linear(c_z, c_z, init="gating")

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        _check_channels(z, self.c_z, "triangle multiplication")
        z = self.norm_in(z)
        a = torch.sigmoid(self.a_gate(z)) * self.a_proj(z)
        b = torch.sigmoid(self.b_gate(z)) * self.b_proj(z)
        # channel-major batched matmul; much faster than einsum on CPU
        a = a.movedim(-1, -3)
        b = b.movedim(-1, -3)
        if self.outgoing:
            x = a.contiguous() @ b.transpose(-1, -2).contiguous()
        else:
            x = a.transpose(-1, -2).contiguous() @ b.contiguous()
        x = x.movedim(-3, -1)
        return torch.sigmoid(self.out_gate(z)) * self.out_proj(self.norm_out(x))


class PairTransition(nn.Module):
    def __init__(self, c_z: int = 64, expansion: int = 2):
        super().__init__()
        self.c_z = c_z
        self.norm = nn.LayerNorm(c_z)
        self.up = make_linear(c_z, expansion * c_z)
        self.down = make_linear(expansion * c_z, c_z)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.c_z:
            raise InvalidInputError(f"pair transition expects {self.c_z} channels, got {z.shape[-1]}")
        return self.down(torch.relu(self.up(self.norm(z))))


class PairBlock(nn.Module):
    def __init__(self, c_z: int = 64, n_heads: int = 4, c_hidden_att: int = 16,
                 c_hidden_mul: int = 64, transition_n: int = 2):
        super().__init__()
        self.tri_att_start = TriangleAttention(c_z, c_hidden_att, n_heads, starting=True)
        self.tri_att_end = TriangleAttention(c_z, c_hidden_att, n_heads, starting=False)
        self.tri_mul_out = TriangleMultiplication(c_z, c_hidden_mul, outgoing=True)
        self.tri_mul_in = TriangleMultiplication(c_z, c_hidden_mul, outgoing=False)
        self.transition = PairTransition(c_z, transition_n)

    def sublayers(self) -> list[nn.Module]:
        return [self.tri_att_start, self.tri_att_end, self.tri_mul_out, self.tri_mul_in, self.transition]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        for layer in self.sublayers():
            z = z + layer(z)
        return z


class PairStack(nn.Module):
    def __init__(self, n_blocks: int = 4, c_z: int = 64, **block_kwargs):
        super().__init__()
        self.blocks = nn.ModuleList(PairBlock(c_z, **block_kwargs) for _ in range(n_blocks))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            z = block(z)
        return z


def _fourier_frequencies(d: int, seed: int, sigma: float) -> np.ndarray:
    if d < 2 or d % 2:
        raise InvalidInputError(f"Fourier embedding dimension must be even and >= 2, got {d}")
    return np.random.default_rng(seed).normal(0.0, sigma, size=d // 2)


def gaussian_fourier_embedding(t: float, d: int = TIME_EMBED_DIM, seed: int = TIME_EMBED_SEED,
                               sigma: float = 1.0) -> np.ndarray:
    w = _fourier_frequencies(d, seed, sigma)
    arg = 2.0 * np.pi * w * float(t)
    return np.concatenate([np.sin(arg), np.cos(arg)])


class GaussianFourierEmbedding(nn.Module):
    def __init__(self, d: int = TIME_EMBED_DIM, seed: int = TIME_EMBED_SEED, sigma: float = 1.0):
        super().__init__()
        # fixed float64 frequencies, deliberately not a buffer so that .float()
        # or .double() on the owning module cannot round them
        self.freqs = torch.from_numpy(_fourier_frequencies(d, seed, sigma))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t)
        out_dtype = t.dtype if t.is_floating_point() else torch.get_default_dtype()
        arg = 2.0 * math.pi * t[..., None].to(torch.float64) * self.freqs
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1).to(out_dtype)


def distance_bin_index(x: torch.Tensor) -> torch.Tensor:
    """Distance bin of every residue pair of ``(..., n, 3)`` coordinates, computed in float64."""
    x = x.to(torch.float64)
    diff = x[..., :, None, :] - x[..., None, :, :]
    d = torch.sqrt((diff * diff).sum(-1))
    width = (DIST_MAX - DIST_MIN) / DIST_BINS
    return torch.floor((d - DIST_MIN) / width).clamp(0, DIST_BINS - 1).long()


def distance_one_hot(x: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    return F.one_hot(distance_bin_index(x), DIST_BINS).to(dtype)


class InputEmbedder(nn.Module):
    """Embeds (noisy coordinates, optional torsions, time) into single/pair deltas."""

    def __init__(self, c_s: int = 64, c_z_out: int = 64, c_z: int = 64, n_blocks: int = 4,
                 time_dim: int = TIME_EMBED_DIM, time_seed: int = TIME_EMBED_SEED,
                 time_sigma: float = 1.0):
        super().__init__()
        self.c_s, self.c_z_out, self.c_z = c_s, c_z_out, c_z
        self.pair_in = make_linear(DIST_BINS + 1, c_z)
        self.pair_stack = PairStack(n_blocks, c_z)
        self.pair_out = make_linear(c_z, c_z_out, init="final")
        self.time_embed = GaussianFourierEmbedding(time_dim, time_seed, time_sigma)
        self.time_out = make_linear(time_dim, c_z_out, init="final")
        self.torsion_in = make_linear(TORSION_INPUT_DIM, c_s)
        self.torsion_out = make_linear(c_s, c_s, init="final")

    def forward(self, x, t, torsions=None, pair_mask=None) -> tuple[torch.Tensor, torch.Tensor]:
        """
        Parameters
        ----------
        x : (..., n, 3) coordinates (array or tensor)
        t : float or (...,) tensor of times in [0, 1]
        torsions : optional (..., n, 9) tensor of sin/cos values and masks
        pair_mask : optional (..., n, n) tensor; defaults to all ones
        """
        dtype = self.pair_in.weight.dtype
        x = torch.as_tensor(x)
        if not torch.isfinite(x).all():
            raise InvalidInputError("input coordinates contain non-finite values")
        lead = x.shape[:-2]
        n = x.shape[-2]
        # Linear(Concat(one_hot, mask)) evaluated as a row gather plus mask column
        w, b = self.pair_in.weight, self.pair_in.bias
        table, mask_col = w[:, :DIST_BINS].T, w[:, DIST_BINS]
        t = torch.as_tensor(t, dtype=dtype)
        t_emb = self.time_out(self.time_embed(t))
        compose = len(self.pair_stack.blocks) == 0
        if compose:
            # no blocks: pair_in and pair_out are consecutive linear maps
            w_out = self.pair_out.weight
            table, mask_col, b = table @ w_out.T, w_out @ mask_col, w_out @ b + self.pair_out.bias
        if pair_mask is None:
            b = b + mask_col
            mask = None
        else:
            mask = torch.as_tensor(pair_mask, dtype=dtype)
            if mask.shape[-2:] != (n, n):
                raise InvalidInputError(f"pair mask must end in ({n}, {n}), got {tuple(mask.shape)}")
        if compose and t.dim() == 0:
            b = b + t_emb
        z = F.embedding(distance_bin_index(x), (table + b).contiguous())
        if mask is not None:
            z = z + mask[..., None] * mask_col
        if not compose:
            z = self.pair_stack(z)
            if t.dim() == 0:
                z = F.linear(z, self.pair_out.weight, self.pair_out.bias + t_emb)
            else:
                z = self.pair_out(z)
        if t.dim() > 0:
            z = z + t_emb[..., None, None, :]

        if torsions is not None:
            tor = torch.as_tensor(torsions, dtype=dtype)
            s = self.torsion_out(self.torsion_in(tor))
        else:
            s = torch.zeros(*lead, n, self.c_s, dtype=dtype)
        return s, z


def input_embedding(xt, torsions, t, params: InputEmbedder):
    """Functional wrapper: ``torsions`` may be a TorsionFeatures or None."""
    tor = None
    if torsions is not None:
        tor = torch.from_numpy(torsions.as_input())
    with torch.no_grad():
        return params(torch.as_tensor(np.asarray(xt, dtype=np.float64)), t, tor)


def condition(provider_single, provider_pair, embed_single, embed_pair):
    """Add embedder outputs onto provider features (leading batch dims broadcast)."""
    if provider_single.shape[-2:] != embed_single.shape[-2:]:
        raise InvalidInputError(
            f"single shape mismatch: {tuple(provider_single.shape)} vs {tuple(embed_single.shape)}")
    if provider_pair.shape[-3:] != embed_pair.shape[-3:]:
        raise InvalidInputError(
            f"pair shape mismatch: {tuple(provider_pair.shape)} vs {tuple(embed_pair.shape)}")
    return provider_single + embed_single, provider_pair + embed_pair


class FeatureProvider(Protocol):
    def __call__(self, sequence: str) -> tuple[torch.Tensor, torch.Tensor]: ...


def _aa_one_hot(sequence: str) -> np.ndarray:
    idx = [AMINO_ACIDS.find(a) if a in AMINO_ACIDS else len(AMINO_ACIDS) for a in sequence.upper()]
    return np.eye(len(AMINO_ACIDS) + 1)[idx]


def synthetic_feature_provider(sequence: str, seed: int = 0, c_s: int = 64,
                               c_z: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic stand-in trunk features from seeded random projections."""
    if not sequence:
        raise InvalidInputError("sequence must be non-empty")
    n = len(sequence)
    rng = np.random.default_rng(seed)
    aa = _aa_one_hot(sequence)
    pos = np.arange(n)[:, None]
    freqs = np.exp(-np.arange(8) * np.log(1e3) / 8)[None, :]
    pos_feat = np.concatenate([np.sin(pos * freqs), np.cos(pos * freqs)], axis=1)

    single_in = np.concatenate([aa, pos_feat], axis=1)
    w_s = rng.normal(0, 1 / np.sqrt(single_in.shape[1]), (single_in.shape[1], c_s))
    single = np.tanh(single_in @ w_s)

    rel = np.clip(np.arange(n)[None, :] - np.arange(n)[:, None], -32, 32) + 32
    k_aa = aa.shape[1]
    w_zi = rng.normal(0, 1 / np.sqrt(2 * k_aa + 65), (k_aa, c_z))
    w_zj = rng.normal(0, 1 / np.sqrt(2 * k_aa + 65), (k_aa, c_z))
    w_rel = rng.normal(0, 1 / np.sqrt(2 * k_aa + 65), (65, c_z))
    pair = np.tanh((aa @ w_zi)[:, None, :] + (aa @ w_zj)[None, :, :] + w_rel[rel])
    return (torch.from_numpy(single.astype(np.float32)),
            torch.from_numpy(pair.astype(np.float32)))


class SyntheticFeatureProvider:
    def __init__(self, seed: int = 0, c_s: int = 64, c_z: int = 64):
        self.seed, self.c_s, self.c_z = seed, c_s, c_z

    def __call__(self, sequence: str):
        return synthetic_feature_provider(sequence, self.seed, self.c_s, self.c_z)


def file_feature_provider(path) -> tuple[torch.Tensor, torch.Tensor]:
    from featflow.io import read_features

    single, pair = read_features(path)
    return torch.from_numpy(single), torch.from_numpy(pair)


class FileFeatureProvider:
    """Serves features exported from an external trunk for one target."""

    def __init__(self, path):
        self.path = path
        self._cache = None

    def __call__(self, sequence: str):
        if self._cache is None:
            self._cache = file_feature_provider(self.path)
        single, pair = self._cache
        if single.shape[0] != len(sequence):
            raise InvalidInputError(
                f"feature file {self.path} has {single.shape[0]} residues, sequence has {len(sequence)}")
        return single, pair
