import json
import math
import warnings

import numpy as np
import pytest
from builders import aux_determined_scm, merged_levels_scm, proxy_scm, unconfounded_causes_scm
from scipy.stats import chi2_contingency

from multicause.errors import DagViolation, StratumTooSmall
from multicause.factor import LatentClassModel
from multicause.gate import (
    CITestResult,
    gate_decision,
    inject_dependence,
    mutual_ci_test,
    power_analysis,
    prop1_verify_population,
    prop1_verify_tables,
    run_gate,
)
from multicause.scm import default_template, random_scm
from multicause.tables import Dataset, VarSpec

CAUSES = tuple(VarSpec(f"A{k + 1}", 2) for k in range(3))


def null_model():
    t = np.array([[0.8, 0.2], [0.3, 0.7]])
    return LatentClassModel([0.4, 0.6], (t, t, t), CAUSES)


def null_data(n, seed):
    values, z = null_model().sample(n, np.random.default_rng(seed))
    return values, z


def scipy_g(values, zhat, k):
    rest = np.ravel_multi_index(np.delete(values, k, axis=1).T, (2,) * (values.shape[1] - 1))
    total = 0.0
    for s in np.unique(zhat):
        idx = zhat == s
        table = np.zeros((2, 2 ** (values.shape[1] - 1)))
        np.add.at(table, (values[idx, k], rest[idx]), 1)
        table = table[:, table.sum(axis=0) > 0]
        table = table[table.sum(axis=1) > 0]
        if min(table.shape) > 1:
            total += chi2_contingency(table, correction=False, lambda_="log-likelihood")[0]
    return total


def test_statistic_matches_scipy():
    values, z = null_data(800, 1)
    for k in range(3):
        res = mutual_ci_test(values, z, k, 99)
        assert res.statistic == pytest.approx(scipy_g(values, z, k), rel=1e-9, abs=1e-9)
        assert res.approximation == "joint"


def test_constant_cause_gives_p_one():
    values, z = null_data(300, 2)
    values[:, 1] = 0
    res = mutual_ci_test(values, z, 1, 99)
    assert res.statistic == 0 and res.pvalue == 1.0


def test_copied_cause_rejects():
    values, z = null_data(1000, 3)
    values[:, 1] = values[:, 0]
    res = mutual_ci_test(values, z, 0, 199)
    assert res.pvalue < 0.01
    assert res.pvalue == pytest.approx(1 / 200)


def test_null_rejection_rate():
    rejected = 0
    for t in range(100):
        values, z = null_data(500, 100 + t)
        rejected += mutual_ci_test(values, z, t % 3, 99, seed=t).pvalue <= 0.05
    # binomial(100, 0.05): P(X > 12) < 0.001
    assert rejected <= 12


def test_pvalue_range_and_determinism():
    values, z = null_data(400, 4)
    a = mutual_ci_test(values, z, 2, 149, seed=7)
    b = mutual_ci_test(values, z, 2, 149, seed=7)
    assert a == b
    assert 1 / 150 <= a.pvalue <= 1


def test_permutations_stay_within_strata():
    # inside each stratum A1 is constant, so no permutation can change the statistic
    z = np.repeat([0, 1], 50)
    values = np.column_stack([z, np.random.default_rng(0).integers(0, 2, 100), np.zeros(100, int)])
    assert mutual_ci_test(values, z, 0, 99).pvalue == 1.0


def test_small_stratum_warning():
    values, z = null_data(300, 5)
    z = z.copy()
    z[:3] = 9
    with pytest.warns(StratumTooSmall):
        res = mutual_ci_test(values, z, 0, 99)
    assert res.excluded_strata == [9]


def test_preconditions():
    values, z = null_data(100, 6)
    with pytest.raises(ValueError):
        mutual_ci_test(values, z, 0, 50)
    with pytest.raises(ValueError):
        mutual_ci_test(values, z[:-1], 0, 99)


def test_pairwise_mode_for_many_causes():
    t = np.array([[0.8, 0.2], [0.3, 0.7]])
    model = LatentClassModel([0.5, 0.5], (t,) * 7, tuple(VarSpec(f"A{k}", 2) for k in range(7)))
    values, z = model.sample(500, np.random.default_rng(7))
    res = mutual_ci_test(values, z, 0, 99)
    assert res.approximation == "pairwise"
    expected = sum(scipy_g(values[:, [0, j]], z, 0) for j in range(1, 7))
    assert res.statistic == pytest.approx(expected, rel=1e-9)


def test_dataset_input():
    values, z = null_data(200, 8)
    ds = Dataset(CAUSES, values)
    assert mutual_ci_test(ds, z, 0, 99) == mutual_ci_test(values, z, 0, 99)


def test_decision_rule():
    assert gate_decision([1.0, 1.0, 1.0], 0.05).decision == "PASS"
    assert gate_decision([1.0, 0.01, 1.0], 0.05).decision == "FAIL"
    assert gate_decision([0.05], 0.05).decision == "FAIL"
    # Bonferroni uses alpha / m
    assert gate_decision([0.03, 0.9], 0.05, bonferroni=True).decision == "PASS"
    report = gate_decision([0.5], 0.05)
    assert math.isinf(report.power_note["min_detectable_strength"])
    assert json.loads(json.dumps(report.to_dict()))["power_note"]["min_detectable_strength"] is None


def test_decision_monotone_in_alpha(rng):
    for _ in range(200):
        p = rng.uniform(size=3)
        alphas = np.sort(rng.uniform(size=5))
        decisions = [gate_decision(p, a).decision for a in alphas]
        # once FAIL at some alpha, every larger alpha also FAILs
        if "FAIL" in decisions:
            assert all(d == "FAIL" for d in decisions[decisions.index("FAIL"):])


def test_inject_dependence_extremes():
    values, z = null_data(500, 9)
    rng = np.random.default_rng(0)
    full = inject_dependence(values, z, 0, 1, 1.0, [2, 2, 2], rng)
    np.testing.assert_array_equal(full[:, 0], values[:, 1])
    none = inject_dependence(values, z, 0, 1, 0.0, [2, 2, 2], rng)
    for s in np.unique(z):
        assert np.bincount(none[z == s, 0], minlength=2).tolist() == np.bincount(values[z == s, 0], minlength=2).tolist()


def test_power_note_decreases_with_n():
    small = power_analysis(*null_data(300, 10), 0.05, seed=1, n_trials=10, which=[0])
    large = power_analysis(*null_data(5000, 11), 0.05, seed=1, n_trials=10, which=[0])
    assert math.isfinite(large["min_detectable_strength"])
    assert large["min_detectable_strength"] < small["min_detectable_strength"]


def test_run_gate_reports():
    values, z = null_data(600, 12)
    report = run_gate(values, z, 0.05, 99, seed=3, power_kwargs={"n_trials": 5, "which": [0]})
    assert len(report.per_cause_pvalues) == 3
    assert all(0 <= p <= 1 for p in report.per_cause_pvalues)
    assert report.decision == ("PASS" if min(report.per_cause_pvalues) > 0.05 else "FAIL")
    assert "min_detectable_strength" in report.power_note
    again = run_gate(values, z, 0.05, 99, seed=3, power_kwargs={"n_trials": 5, "which": [0]})
    assert again.to_dict() == report.to_dict()


def test_prop1_true_confounder_proxy(rng):
    scm = proxy_scm(rng)
    res = prop1_verify_population(scm, lambda a, x: x)
    assert res.holds and res.cause_gap < 1e-12 and res.independence_gap < 1e-12


def test_prop1_constant_zhat_premise_fails():
    res = prop1_verify_population(default_template(), lambda a, x: 0)
    assert res.cause_gap > 1e-3
    assert res.independence_gap > 1e-3
    assert res.holds  # premise fails, so no counterexample


@pytest.mark.parametrize("kind", ["proxy", "aux", "unconfounded", "merged"])
def test_prop1_sweep(rng, kind):
    for _ in range(15):
        if kind == "proxy":
            scm, fn = proxy_scm(rng), (lambda a, x: x)
        elif kind == "aux":
            scm, fn = aux_determined_scm(rng), (lambda a, x: a[-1] // 2)
        elif kind == "unconfounded":
            scm, fn = unconfounded_causes_scm(rng), (lambda a, x: 0)
        else:
            scm, fn = merged_levels_scm(rng), (lambda a, x: x)
        res = prop1_verify_population(scm, fn)
        assert res.cause_gap <= 1e-9
        assert res.independence_gap <= 1e-9, scm.to_dict()


def test_prop1_random_zhat_never_counterexample(rng):
    for _ in range(30):
        scm = random_scm(rng, n_z=2, cause_cards=(2, 2, 2), n_y=2)
        table = {a: int(rng.integers(2)) for a in np.ndindex(2, 2, 2)}
        assert prop1_verify_population(scm, lambda a, x: table[tuple(a)]).holds


def test_prop1_dag_violation():
    p = np.full((2, 2, 2), 1 / 8)
    p[0, 0, 0] += 0.1
    p[1, 0, 0] -= 0.1
    with pytest.raises(DagViolation):
        prop1_verify_tables(p, np.full((2, 2, 2), 0.5), lambda a, x: 0)


def test_result_type():
    values, z = null_data(200, 13)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert isinstance(mutual_ci_test(values, z, 0, 99), CITestResult)
