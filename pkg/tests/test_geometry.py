import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from featflow.errors import InvalidInputError
from featflow.geometry import (
    DIST_BINS, DIST_MAX, DIST_MIN, AtomRecord, TorsionFeatures, bin_distances, compute_torsions,
    contact_map, dihedral, gamma_atom, kabsch_align, pairwise_distances, random_rotation, rmsd,
)
from helpers import random_backbone_atoms

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def _rot_from_euler(a, b, c):
    ca, sa, cb, sb, cc, sc = math.cos(a), math.sin(a), math.cos(b), math.sin(b), math.cos(c), math.sin(c)
    rz1 = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz2 = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz1 @ ry @ rz2


def _grid_min_rmsd(mobile, reference):
    """Coarse-to-fine search over ZYZ Euler angles (final step 0.5 degrees).

    Translation is fixed by centroid matching; no SVD involved.
    """
    m = mobile - mobile.mean(0)
    r = reference - reference.mean(0)

    def score(angles):
        rot = _rot_from_euler(*angles)
        return math.sqrt(np.mean(np.sum((m @ rot.T - r) ** 2, axis=1)))

    step = math.radians(10.0)
    grid_a = np.arange(0, 2 * math.pi, step)
    grid_b = np.arange(0, math.pi + 1e-9, step)
    best = min(itertools.product(grid_a, grid_b, grid_a), key=score)
    while step > math.radians(0.5) + 1e-12:
        step /= 2
        offsets = np.arange(-4, 5) * step
        centre = best
        best = min(((centre[0] + i, centre[1] + j, centre[2] + k)
                    for i in offsets for j in offsets for k in offsets), key=score)
    return score(best)


# --------------------------------------------------------------------------- distances


def test_pairwise_distance_345():
    d = pairwise_distances([[0, 0, 0], [3, 4, 0]])
    assert d[0, 1] == 5.0 and d[1, 0] == 5.0


def test_pairwise_single_point():
    assert pairwise_distances([[1.0, 2.0, 3.0]]).tolist() == [[0.0]]


def test_pairwise_matches_per_pair_norms():
    x = np.random.default_rng(3).normal(size=(5, 3)) * 4
    d = pairwise_distances(x)
    for i in range(5):
        for j in range(5):
            assert d[i, j] == pytest.approx(math.dist(x[i], x[j]), abs=1e-12)


def test_pairwise_rejects_nonfinite():
    with pytest.raises(InvalidInputError):
        pairwise_distances([[0, 0, 0], [np.nan, 0, 0]])


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.just(3)), elements=finite))
def test_pairwise_properties(x):
    d = pairwise_distances(x)
    assert np.allclose(d, d.T)
    assert np.all(np.diag(d) == 0)
    assert np.all(d >= 0)


# --------------------------------------------------------------------------- binning


def test_bin_examples():
    width = (DIST_MAX - DIST_MIN) / DIST_BINS
    assert bin_distances(2.0) == 0
    assert bin_distances(60.0) == 38
    assert bin_distances(DIST_MIN + 1.5 * width) == 1
    assert bin_distances(DIST_MAX) == DIST_BINS - 1


def test_bin_covers_all_indices_monotone():
    d = np.linspace(0.0, 80.0, 20001)
    idx = bin_distances(d)
    assert np.all(np.diff(idx) >= 0)
    assert set(idx.tolist()) == set(range(DIST_BINS))


def test_bin_preconditions():
    with pytest.raises(InvalidInputError):
        bin_distances(1.0, min=5.0, max=5.0)
    with pytest.raises(InvalidInputError):
        bin_distances(1.0, n_bins=1)


# --------------------------------------------------------------------------- superposition


def test_kabsch_identity():
    x = np.random.default_rng(0).normal(size=(6, 3))
    al = kabsch_align(x, x)
    assert np.allclose(al.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(al.translation, 0, atol=1e-12)
    assert al.rmsd == pytest.approx(0, abs=1e-12)


def test_kabsch_recovers_rigid_transform():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(7, 3)) * 3
    rot = random_rotation(rng)
    y = x @ rot.T + np.array([4.0, -2.0, 9.0])
    al = kabsch_align(x, y)
    assert al.rmsd <= 1e-6
    assert np.linalg.det(al.rotation) == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(x @ al.rotation.T + al.translation, al.aligned, atol=1e-12)


def test_kabsch_matches_grid_search():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(4, 3)) * 2
    b = rng.normal(size=(4, 3)) * 2
    al = kabsch_align(a, b)
    grid = _grid_min_rmsd(a, b)
    assert al.rmsd <= grid + 1e-9
    assert abs(al.rmsd - grid) <= 1e-3


def test_kabsch_length_mismatch():
    with pytest.raises(InvalidInputError):
        kabsch_align(np.zeros((3, 3)), np.zeros((4, 3)))


def test_kabsch_reflection_not_used():
    # mirror image: the best proper rotation cannot reach zero rmsd
    x = np.random.default_rng(5).normal(size=(6, 3))
    al = kabsch_align(x, x * np.array([1, 1, -1]))
    assert np.linalg.det(al.rotation) == pytest.approx(1.0)
    assert al.rmsd > 1e-3


def test_kabsch_degenerate_inputs():
    line = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    target = line @ random_rotation(np.random.default_rng(2)).T + 1.0
    al = kabsch_align(line, target)
    assert al.rmsd <= 1e-9
    one = kabsch_align([[1.0, 2, 3]], [[4.0, 5, 6]])
    assert one.rmsd == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 3), elements=finite), arrays(np.float64, (6, 3), elements=finite))
def test_alignment_never_hurts(a, b):
    assert kabsch_align(a, b).rmsd <= rmsd(a, b) + 1e-9


def test_rmsd_examples():
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert rmsd(x, x) == 0.0
    assert rmsd(x, x + np.array([1.0, 0, 0])) == pytest.approx(1.0)
    a = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0]])
    b = np.array([[0.0, 0, 1], [1, 0, 0], [0, 0, 0]])
    assert rmsd(a, b) == pytest.approx(math.sqrt((1 + 0 + 4) / 3))
    with pytest.raises(InvalidInputError):
        rmsd(a, b[:2])


# --------------------------------------------------------------------------- torsions


def test_dihedral_planar_trans_and_cis():
    zigzag = [np.array(p, float) for p in ([0, 1, 0], [0, 0, 0], [1, 0, 0], [1, -1, 0])]
    assert abs(math.degrees(dihedral(*zigzag))) == pytest.approx(180.0)
    cis = [np.array(p, float) for p in ([0, 1, 0], [0, 0, 0], [1, 0, 0], [1, 1, 0])]
    assert dihedral(*cis) == pytest.approx(0.0, abs=1e-12)


def test_dihedral_sign_convention():
    # right-handed: looking down b->c, d rotated clockwise from a is positive
    p = [np.array(v, float) for v in ([1, 0, 0], [0, 0, 0], [0, 0, 1], [0, 1, 1])]
    assert math.degrees(dihedral(*p)) == pytest.approx(90.0)


def test_gamma_table():
    assert gamma_atom("VAL") == "CG1" and gamma_atom("ILE") == "CG1"
    assert gamma_atom("SER") == "OG" and gamma_atom("THR") == "OG1" and gamma_atom("CYS") == "SG"
    assert gamma_atom("LEU") == "CG"
    assert gamma_atom("GLY") is None and gamma_atom("ALA") is None


def test_torsion_masks():
    atoms = random_backbone_atoms(np.random.default_rng(0), "MGAKS")
    tor = compute_torsions(atoms)
    assert not tor.mask[0, 0]  # first phi
    assert not tor.mask[-1, 1]  # last psi
    assert not tor.mask[1, 2] and not tor.mask[2, 2]  # GLY, ALA chi1
    assert tor.mask[3, 2] and tor.mask[4, 2]
    assert np.all(tor.values[~tor.mask] == 0.0)
    on = tor.values[tor.mask]
    assert np.allclose((on ** 2).sum(-1), 1.0, atol=1e-9)


def test_missing_atom_masks_angle():
    atoms = [a for a in random_backbone_atoms(np.random.default_rng(1), "KKK")
             if not (a.residue_index == 2 and a.atom_name == "CB")]
    tor = compute_torsions(atoms)
    assert not tor.mask[1, 2]
    assert tor.mask[1, 0] and tor.mask[1, 1]


def test_chain_break_masks_phi_psi():
    atoms = random_backbone_atoms(np.random.default_rng(2), "KKKK")
    shifted = [AtomRecord(a.residue_index + (5 if a.residue_index >= 3 else 0), a.residue_name,
                          a.atom_name, a.position) for a in atoms]
    tor = compute_torsions(shifted)
    assert not tor.mask[1, 1] and not tor.mask[2, 0]


def test_torsions_rigid_invariant():
    rng = np.random.default_rng(4)
    atoms = random_backbone_atoms(rng, "MKTVSCIDEG")
    ref = compute_torsions(atoms).values
    for _ in range(10):
        rot, t = random_rotation(rng), rng.normal(size=3) * 20
        moved = [AtomRecord(a.residue_index, a.residue_name, a.atom_name,
                            tuple(a.xyz @ rot.T + t)) for a in atoms]
        assert np.max(np.abs(compute_torsions(moved).values - ref)) < 1e-6


def test_torsion_features_roundtrip():
    ang = np.array([[0.3, -2.0, math.pi], [1.0, 0.0, -1.5]])
    mask = np.array([[True, True, True], [False, True, True]])
    tf = TorsionFeatures.from_angles(ang, mask)
    got = tf.angles()
    assert np.isnan(got[1, 0])
    assert np.allclose(got[mask], ang[mask])
    assert tf.as_input().shape == (2, 9)
    with pytest.raises(InvalidInputError):
        TorsionFeatures(np.zeros((2, 3, 2)), np.zeros((3, 3), bool))


# --------------------------------------------------------------------------- contacts


def test_contact_straight_chain():
    x = np.array([[3.8 * i, 0.0, 0.0] for i in range(6)])
    cm = contact_map(x, 7.0, 3)
    assert not cm.matrix[0, 3]
    assert not np.any(np.diag(cm.matrix))


def test_contact_threshold_definition():
    x = np.zeros((6, 3))
    x[5] = [6.9, 0, 0]
    x[1:5] = [[100 * k, 100, 0] for k in range(1, 5)]
    cm = contact_map(x, 7.0, 3)
    assert cm.matrix[0, 5] and cm.matrix[5, 0]
    assert cm.pairs() == {(0, 5)}


def test_contact_properties():
    rng = np.random.default_rng(9)
    x = np.cumsum(rng.normal(0, 2.5, (15, 3)), axis=0)
    m = contact_map(x).matrix
    assert np.array_equal(m, m.T)
    sep = np.abs(np.subtract.outer(np.arange(15), np.arange(15)))
    assert not np.any(m[sep < 3])
    rot = random_rotation(rng)
    assert np.array_equal(m, contact_map(x @ rot.T + 3.0).matrix)
    with pytest.raises(InvalidInputError):
        contact_map(x, 0.0)
