"""Synthetic structures and ensembles shared by the test modules."""

from __future__ import annotations

import numpy as np

from featflow.denoiser import reconstruct_backbone
from featflow.geometry import AtomRecord, TorsionFeatures, random_rotation
from featflow.metrics import Ensemble


def helix(n: int, radius: float = 2.3, rise: float = 1.5, turn_deg: float = 100.0) -> np.ndarray:
    k = np.arange(n)
    turn = np.radians(turn_deg)
    return np.stack([radius * np.cos(turn * k), radius * np.sin(turn * k), rise * k], axis=1)


def rotate_about(points: np.ndarray, pivot: np.ndarray, axis, angle: float) -> np.ndarray:
    """Rodrigues rotation of ``points`` by ``angle`` (radians) about ``axis`` through ``pivot``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    r = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k
    return (points - pivot) @ r.T + pivot


def two_state_frames(n_frames: int = 200, theta: float = 0.4, wiggle: float = 0.15,
                     noise: float = 0.1, seed: int = 0, n: int = 12):
    """Helix whose C-terminal third hinges by +-theta (alternating frames).

    Residues 8.. rotate about residue 7; residues 0..2 also wiggle about
    residue 3 by a Gaussian angle so the ensemble is not purely binary.
    Returns ``(frames, labels)``.
    """
    rng = np.random.default_rng(seed)
    base = helix(n)
    frames, labels = [], []
    for k in range(n_frames):
        lab = k % 2
        x = base.copy()
        x[8:] = rotate_about(x[8:], x[7], [1.0, 0.0, 0.0], theta if lab else -theta)
        x[:3] = rotate_about(x[:3], x[3], [0.0, 1.0, 0.0], rng.normal(0.0, wiggle))
        x = x + rng.normal(0.0, noise, x.shape)
        frames.append(x)
        labels.append(lab)
    return np.array(frames), np.array(labels)


def random_ensemble(rng: np.random.Generator, n_frames: int = 30, n_res: int = 10,
                    spread: float = 0.8, with_atoms: bool = True, sequence: str | None = None) -> Ensemble:
    """Noisy, randomly rotated copies of a helix, optionally with full backbone atoms."""
    base = helix(n_res)
    seq = sequence or "".join(rng.choice(list("ACDEFHIKLMNQRSTVWY"), size=n_res))
    frames, atoms = [], []
    for _ in range(n_frames):
        x = base + rng.normal(0.0, spread, base.shape)
        x = x @ random_rotation(rng).T + rng.normal(0.0, 5.0, 3)
        frames.append(x)
        if with_atoms:
            ang = rng.uniform(-np.pi, np.pi, size=(n_res, 3))
            tor = TorsionFeatures.from_angles(ang, np.ones((n_res, 3), dtype=bool))
            atoms.append(reconstruct_backbone(x, tor, seq))
    frames = np.array(frames)
    if with_atoms:
        # metric frames are the CA positions of the atom records
        frames = np.array([[a.xyz for a in recs if a.atom_name == "CA"] for recs in atoms])
    return Ensemble(frames, atoms if with_atoms else None, "random", seq)


def random_backbone_atoms(rng: np.random.Generator, sequence: str, first: int = 1) -> list[AtomRecord]:
    """A backbone with random torsions built on a random CB trace."""
    n = len(sequence)
    trace = np.cumsum(rng.normal(0.0, 2.2, (n, 3)), axis=0)
    ang = rng.uniform(-np.pi, np.pi, size=(n, 3))
    tor = TorsionFeatures.from_angles(ang, np.ones((n, 3), dtype=bool))
    return reconstruct_backbone(trace, tor, sequence, first_residue=first)



def finite_difference_check(loss_fn, params, step: float = 1e-4, max_entries: int | None = None,
                            seed: int = 0):
    """Compare autograd against central differences for every (or a sample of) entries.

    ``loss_fn`` takes no arguments and returns a scalar tensor computed from
    ``params`` (float64 tensors with ``requires_grad``). Returns the pairs
    ``(analytic, numeric)`` as two flat arrays.
    """
    import torch

    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic, numeric = [], []
    rng = np.random.default_rng(seed)
    for p in params:
        flat = p.data.view(-1)
        # unused parameters get no gradient; the differences must then vanish too
        grad = p.grad.view(-1) if p.grad is not None else torch.zeros_like(flat)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            idx = rng.choice(idx, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
            analytic.append(grad[i].item())
            numeric.append((up - down) / (2 * step))
    return np.array(analytic), np.array(numeric)


def quaternion_rmsd(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum RMSD over rigid motions via the largest eigenvalue of Horn's 4x4 matrix."""
    x = a - a.mean(0)
    y = b - b.mean(0)
    s = x.T @ y
    sxx, sxy, sxz = s[0]
    syx, syy, syz = s[1]
    szx, szy, szz = s[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    lam = np.linalg.eigvalsh(n)[-1]
    e = np.sum(x * x) + np.sum(y * y) - 2.0 * lam
    return float(np.sqrt(max(e, 0.0) / len(a)))


def rigidly_moved(ensemble: Ensemble, rng: np.random.Generator) -> Ensemble:
    """Copy of ``ensemble`` with every frame (and its atoms) under its own random rigid motion."""
    frames, atoms = [], []
    for k, f in enumerate(ensemble.frames):
        rot, shift = random_rotation(rng), rng.normal(0.0, 10.0, 3)
        frames.append(f @ rot.T + shift)
        if ensemble.atoms is not None:
            atoms.append([AtomRecord(a.residue_index, a.residue_name, a.atom_name,
                                     tuple(a.xyz @ rot.T + shift)) for a in ensemble.atoms[k]])
    return Ensemble(np.array(frames), atoms if ensemble.atoms is not None else None,
                    ensemble.target_id, ensemble.sequence)
