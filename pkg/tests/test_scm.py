import itertools
import json

import numpy as np
import pytest

from multicause.errors import NoConfounding
from multicause.scm import (
    ScmSpec,
    counterfactual_po,
    default_template,
    full_joint,
    ground_truth_po,
    make_confounded_pair,
    observed_joint,
    random_scm,
    sample,
)
from multicause.tables import VarSpec, conditional_array, independence_gap, marginalize, total_variation
from oracles import adjustment_by_enumeration, enumerate_scm


def binary_scm(p_y_given_az, p_z=(0.4, 0.6), p_a=((0.7, 0.3), (0.2, 0.8))):
    return ScmSpec(
        z=VarSpec("Z", 2),
        causes=(VarSpec("A1", 2), VarSpec("A2", 2)),
        y=VarSpec("Y", 2),
        p_z=p_z,
        p_a_given_z=(np.array(p_a), np.array(p_a)),
        p_y_given_az=p_y_given_az,
    )


def test_spec_validation():
    with pytest.raises(ValueError):
        binary_scm(np.full((2, 2, 2, 2), 0.6))
    with pytest.raises(ValueError):
        ScmSpec(VarSpec("Z", 2), (VarSpec("A1", 2),), VarSpec("Y", 2), [0.5, 0.5],
                (np.full((2, 2), 0.5),), np.full((2, 2, 2), 0.5))


def test_po_without_z_dependence():
    rows = np.empty((2, 2, 2, 2))
    for a1, a2 in itertools.product(range(2), repeat=2):
        p = 0.1 + 0.3 * a1 + 0.4 * a2
        rows[a1, a2] = [1 - p, p]
    scm = binary_scm(rows)
    for a in itertools.product(range(2), repeat=2):
        np.testing.assert_allclose(ground_truth_po(scm, a).dist, rows[a][0])


def test_po_null_treatment_effect():
    rows = np.empty((2, 2, 2, 2))
    rows[..., 0, :] = [0.9, 0.1]
    rows[..., 1, :] = [0.3, 0.7]
    scm = binary_scm(rows)
    expected = 0.4 * np.array([0.9, 0.1]) + 0.6 * np.array([0.3, 0.7])
    for a in itertools.product(range(2), repeat=2):
        np.testing.assert_allclose(ground_truth_po(scm, a).dist, expected)


def test_po_matches_enumeration(rng):
    for _ in range(10):
        scm = random_scm(rng, n_z=3, cause_cards=(2, 2, 2), n_y=2)
        for a in itertools.product(range(2), repeat=3):
            np.testing.assert_allclose(ground_truth_po(scm, a).dist, adjustment_by_enumeration(scm, a), atol=1e-13)


def test_po_mapping_assignment():
    scm = default_template()
    assert ground_truth_po(scm, {"A1": 1, "A2": 0, "A3": 1}).a == (1, 0, 1)
    with pytest.raises(ValueError):
        ground_truth_po(scm, (0, 2, 0))


def test_observed_joint_degenerate_point_mass():
    one = np.array([[0.0, 1.0], [0.0, 1.0]])
    rows = np.zeros((2, 2, 2, 2))
    rows[..., 0] = 1.0
    scm = binary_scm(rows, p_z=(1.0, 0.0), p_a=one)
    obs = observed_joint(scm)
    assert obs.probs[1, 1, 0] == 1.0
    assert obs.probs.sum() == 1.0


def test_observed_joint_trivial_latent(rng):
    scm = random_scm(rng, n_z=1, cause_cards=(2, 3), n_y=2)
    obs = observed_joint(scm)
    expected = np.einsum("a,b,aby->aby", scm.p_a_given_z[0][0], scm.p_a_given_z[1][0], scm.p_y_given_az[:, :, 0, :])
    np.testing.assert_allclose(obs.probs, expected, atol=1e-15)


def test_observed_joint_matches_enumeration(rng):
    scm = random_scm(rng, n_z=3, cause_cards=(2, 3, 2), n_y=3, n_x=2)
    obs = observed_joint(scm)
    assert obs.names == ("A1", "A2", "A3", "X", "Y")
    expected = np.zeros(obs.shape)
    for (a, x, y, z), p in enumerate_scm(scm).items():
        expected[a + (x, y)] += p
    np.testing.assert_allclose(obs.probs, expected, atol=1e-15)


def test_structural_independences_hold(rng):
    for _ in range(10):
        scm = random_scm(rng, n_z=3, cause_cards=(2, 2, 3), n_y=2, n_x=3)
        full = full_joint(scm)
        assert independence_gap(full, [["A1"], ["A2"], ["A3"]], ["Z"]) < 1e-14
        assert independence_gap(full, [["X"], ["A1", "A2", "A3"]], ["Z"]) < 1e-14


def test_sample_is_reproducible(rng):
    scm = random_scm(rng, n_x=2)
    a, b = sample(scm, 1, seed=7), sample(scm, 1, seed=7)
    np.testing.assert_array_equal(a.data.values, b.data.values)
    assert a.hidden_z.shape == (1,)
    assert "Z" not in a.data.names


def test_sample_prefix_consistent(rng):
    scm = random_scm(rng)
    small, big = sample(scm, 1500, seed=3), sample(scm, 5000, seed=3)
    np.testing.assert_array_equal(small.data.values, big.data.values[:1500])
    np.testing.assert_array_equal(small.hidden_z, big.hidden_z[:1500])


def test_sample_degenerate():
    one = np.array([[0.0, 1.0], [0.0, 1.0]])
    rows = np.zeros((2, 2, 2, 2))
    rows[..., 1] = 1.0
    scm = binary_scm(rows, p_z=(0.0, 1.0), p_a=one)
    s = sample(scm, 200, seed=11)
    assert (s.data.values == s.data.values[0]).all()
    assert (s.hidden_z == 1).all()


def test_sample_frequencies_match_observed_joint(rng):
    scm = random_scm(rng, n_z=3, cause_cards=(2, 2, 2), n_y=2, n_x=2)
    n = 10**5
    emp = sample(scm, n, seed=123).data.empirical_joint()
    exact = observed_joint(scm)
    p = exact.probs.ravel()
    band = 3 * np.sqrt(p * (1 - p) / n)
    inside = np.abs(emp.probs.ravel() - p) <= band
    assert inside.mean() >= 0.99


def test_json_roundtrip(rng):
    scm = random_scm(rng, n_x=3)
    back = ScmSpec.from_dict(json.loads(json.dumps(scm.to_dict())))
    assert back.to_dict() == scm.to_dict()


def test_counterfactual_same_assignment_is_observed_conditional(rng):
    scm = random_scm(rng)
    obs = observed_joint(scm)
    cond, _ = conditional_array(obs, ["Y"], scm.cause_names)
    for a in itertools.product(range(2), repeat=3):
        np.testing.assert_allclose(counterfactual_po(scm, a, a), cond[a], atol=1e-13)


def test_confounded_pair_requires_confounding():
    rows = np.empty((2, 2, 2, 2))
    rows[...] = [0.4, 0.6]
    with pytest.raises(NoConfounding):
        make_confounded_pair(binary_scm(rows), (1, 1))


def test_confounded_pair_default_template():
    template = default_template()
    a_star = (1, 1, 1)
    first, second, gap = make_confounded_pair(template, a_star)
    obs1 = marginalize(observed_joint(first), first.cause_names + ("Y",))
    obs2 = marginalize(observed_joint(second), second.cause_names + ("Y",))
    assert np.abs(obs1.probs - obs2.probs).max() <= 1e-10
    fac1 = marginalize(full_joint(first), first.cause_names + ("Z",))
    fac2 = marginalize(full_joint(second), second.cause_names + ("Z",))
    assert np.abs(fac1.probs - fac2.probs).max() <= 1e-12

    naive, _ = conditional_array(obs1, ["Y"], first.cause_names)
    po1 = ground_truth_po(first, a_star).dist
    po2 = ground_truth_po(second, a_star).dist
    np.testing.assert_allclose(po2, naive[a_star], atol=1e-12)
    assert total_variation(po1, naive[a_star]) > 0.05
    # reported gap is the direct TV between the two truths
    assert gap == pytest.approx(0.5 * np.abs(po1 - po2).sum(), abs=1e-14)
    assert gap >= 0.05


def test_confounded_pair_flags_unidentified_rows():
    # A1 = Z exactly, so (a1, z) with a1 != z has no mass
    p_a = (np.eye(2), np.array([[0.5, 0.5], [0.3, 0.7]]))
    rows = np.empty((2, 2, 2, 2))
    for a1, a2, z in itertools.product(range(2), repeat=3):
        p = 0.2 + 0.5 * z + 0.1 * a2
        rows[a1, a2, z] = [1 - p, p]
    scm = ScmSpec(VarSpec("Z", 2), (VarSpec("A1", 2), VarSpec("A2", 2)), VarSpec("Y", 2), [0.5, 0.5], p_a, rows)
    _, second, gap = make_confounded_pair(scm, (1, 1))
    assert (0, 0, 1) in second.unidentified and (1, 1, 0) in second.unidentified
    obs1 = marginalize(observed_joint(scm), ("A1", "A2", "Y"))
    obs2 = marginalize(observed_joint(second), ("A1", "A2", "Y"))
    assert np.abs(obs1.probs - obs2.probs).max() <= 1e-12
    assert gap > 0
