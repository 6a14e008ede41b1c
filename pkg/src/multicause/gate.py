"""Test-then-estimate gate: are the causes mutually independent given zhat?

The per-cause test compares A_k against the joint level of the remaining
causes inside each zhat stratum with a G-statistic summed over strata, and
calibrates it by permuting A_k within strata. A PASS is only as good as the
test's power, so every report carries a simulated minimum detectable
dependence.

The population-level check of the proposition behind the gate lives here
too: if the causes are independent given zhat(A, X), then each potential
outcome Y(a) is independent of A given zhat(A, X).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import xlogy

from .errors import DagViolation, StratumTooSmall
from .scm import ScmSpec
from .tables import Dataset, JointTable, VarSpec, independence_gap

MIN_STRATUM = 5
JOINT_REST_MAX_CAUSES = 6
PERM_CHUNK = 64
POWER_GRID = (0.01, 0.02, 0.03, 0.05, 0.07, 0.1, 0.14, 0.2, 0.28, 0.4, 0.55, 0.75, 1.0)
POWER_TARGET = 0.8
GAP_TOL = 1e-9


@dataclass
class CITestResult:
    k: int
    statistic: float
    pvalue: float
    n_permutations: int
    approximation: str
    excluded_strata: list = field(default_factory=list)


def _as_values(causes):
    if isinstance(causes, Dataset):
        return causes.values, [v.card for v in causes.vars]
    values = np.asarray(causes, dtype=np.int64)
    return values, [int(values[:, j].max()) + 1 for j in range(values.shape[1])]


def _sum_xlogx(codes, n_cells, n_perm):
    counts = np.bincount(codes.ravel(), minlength=n_perm * n_cells).reshape(n_perm, n_cells)
    return xlogy(counts, counts).sum(axis=1)


class _Strata:
    """Rows sorted by stratum with the fixed margins needed by the G-statistic."""

    def __init__(self, values, cards, zhat, k, min_stratum):
        n, m = values.shape
        labels, codes = np.unique(np.asarray(zhat), return_inverse=True)
        codes = codes.ravel()
        sizes = np.bincount(codes, minlength=len(labels))
        small = np.flatnonzero(sizes < min_stratum)
        self.excluded = [labels[i].item() for i in small]
        if small.size:
            warnings.warn(f"strata {self.excluded} have fewer than {min_stratum} rows and are excluded",
                          StratumTooSmall, stacklevel=3)
        keep = np.isin(codes, small, invert=True)
        order = np.argsort(codes[keep], kind="stable")
        self.s = codes[keep][order]
        vals = values[keep][order]
        self.ak = vals[:, k]
        self.ck = cards[k]
        self.n_strata = len(labels)
        others = [j for j in range(m) if j != k]
        if m <= JOINT_REST_MAX_CAUSES:
            self.approximation = "joint"
            rest_cards = [cards[j] for j in others]
            self.rests = [(np.ravel_multi_index(vals[:, others].T, rest_cards), math.prod(rest_cards))]
        else:
            self.approximation = "pairwise"
            self.rests = [(vals[:, j], cards[j]) for j in others]
        self.sizes = np.bincount(self.s, minlength=self.n_strata)

    def statistic(self, ak):
        """G summed over strata (and over partners in pairwise mode); ak has shape (B, n)."""
        B = ak.shape[0]
        total = np.zeros(B)
        for rest, cr in self.rests:
            n_cells = self.n_strata * self.ck * cr
            base = (self.s * self.ck)[None, :] + ak
            codes = np.arange(B)[:, None] * n_cells + base * cr + rest[None, :]
            obs = _sum_xlogx(codes, n_cells, B)
            # margins are permutation invariant
            row = np.bincount(self.s * self.ck + self.ak, minlength=self.n_strata * self.ck)
            col = np.bincount(self.s * cr + rest, minlength=self.n_strata * cr)
            const = xlogy(row, row).sum() + xlogy(col, col).sum() - xlogy(self.sizes, self.sizes).sum()
            total += 2.0 * (obs - const)
        return np.maximum(total, 0.0)


def mutual_ci_test(causes, zhat, k: int, n_permutations: int = 199, seed: int = 0,
                   min_stratum: int = MIN_STRATUM) -> CITestResult:
    """Permutation test of A_k independent of the other causes given zhat.

    Parameters
    ----------
    causes : Dataset or (n, m) int array
    zhat : (n,) array of stratum labels aligned with the rows
    k : index of the tested cause
    n_permutations : at least 99
    seed : permutations in chunk ``c`` come from ``SeedSequence([seed, c])``

    Returns
    -------
    CITestResult
        ``pvalue = (1 + #{perm >= observed}) / (1 + n_permutations)``.
    """
    if n_permutations < 99:
        raise ValueError("n_permutations must be at least 99")
    values, cards = _as_values(causes)
    if values.shape[0] != len(zhat):
        raise ValueError("zhat must be aligned with the data rows")
    if values.shape[1] < 2:
        raise ValueError("need at least two causes")
    st = _Strata(values, cards, zhat, k, min_stratum)
    observed = float(st.statistic(st.ak[None])[0])
    if st.ak.size == 0:
        return CITestResult(k, 0.0, 1.0, n_permutations, st.approximation, st.excluded)
    thresh = observed - 1e-9 * max(1.0, abs(observed))
    hits = 0
    done = 0
    chunk = 0
    while done < n_permutations:
        b = min(PERM_CHUNK, n_permutations - done)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), chunk]))
        keys = rng.random((PERM_CHUNK, st.ak.size))[:b] + st.s[None, :]
        perm = st.ak[np.argsort(keys, axis=1)]
        hits += int(np.sum(st.statistic(perm) >= thresh))
        done += b
        chunk += 1
    pvalue = (1 + hits) / (1 + n_permutations)
    return CITestResult(k, observed, pvalue, n_permutations, st.approximation, st.excluded)


@dataclass
class GateReport:
    per_cause_pvalues: list[float]
    alpha: float
    decision: str
    power_note: dict
    n_permutations: int
    bonferroni: bool = False
    approximation: str = "joint"
    excluded_strata: list = field(default_factory=list)

    def to_dict(self):
        note = dict(self.power_note)
        if "min_detectable_strength" in note and not math.isfinite(note["min_detectable_strength"]):
            note["min_detectable_strength"] = None
        return {
            "per_cause_pvalues": list(self.per_cause_pvalues),
            "alpha": self.alpha,
            "decision": self.decision,
            "power_note": note,
            "n_permutations": self.n_permutations,
            "bonferroni": self.bonferroni,
            "approximation": self.approximation,
            "excluded_strata": self.excluded_strata,
        }


def inject_dependence(values, zhat, k: int, partner: int, strength: float, cards, rng) -> np.ndarray:
    """Null copy of the data with graded dependence of A_k on A_partner.

    A_k is first shuffled within zhat strata (removing any dependence), then
    each row is overwritten by ``A_partner mod card_k`` with probability
    ``strength``.
    """
    out = np.array(values, copy=True)
    labels = np.asarray(zhat)
    for s in np.unique(labels):
        idx = np.flatnonzero(labels == s)
        out[idx, k] = out[rng.permutation(idx), k]
    hit = rng.random(out.shape[0]) < strength
    out[hit, k] = out[hit, partner] % cards[k]
    return out


def power_analysis(causes, zhat, alpha: float, seed: int = 0, *, strengths: Sequence[float] = POWER_GRID,
                   n_trials: int = 20, n_permutations: int = 99, target: float = POWER_TARGET,
                   which: Sequence[int] | None = None) -> dict:
    """Smallest injected strength rejected in at least ``target`` of trials.

    Strength is the fraction of rows where A_k is overwritten by a copy of
    another cause, so it runs from 0 (null) to 1 (exact copy). The reported
    value is the worst case over the causes examined.
    """
    values, cards = _as_values(causes)
    m = values.shape[1]
    which = range(m) if which is None else which
    per_cause = []
    ss = np.random.SeedSequence(seed)
    for k, child in zip(which, ss.spawn(m)):
        rng = np.random.default_rng(child)
        partner = (k + 1) % m
        found = math.inf
        for strength in strengths:
            rejected = 0
            for _ in range(n_trials):
                data = inject_dependence(values, zhat, k, partner, strength, cards, rng)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", StratumTooSmall)
                    res = mutual_ci_test(data, zhat, k, n_permutations, seed=int(rng.integers(2**63)))
                rejected += res.pvalue <= alpha
            if rejected / n_trials >= target:
                found = float(strength)
                break
        per_cause.append({"k": int(k), "partner": int(partner), "min_detectable_strength": found})
    worst = max((c["min_detectable_strength"] for c in per_cause), default=math.inf)
    return {
        "measure": "fraction of rows with A_k overwritten by a copy of another cause",
        "target_power": target,
        "n_trials": n_trials,
        "n": int(values.shape[0]),
        "min_detectable_strength": worst,
        "per_cause": per_cause,
    }


def gate_decision(results: Sequence[CITestResult | float], alpha: float = 0.05, causes=None, zhat=None,
                  seed: int = 0, *, bonferroni: bool = False, power_kwargs: dict | None = None) -> GateReport:
    """PASS iff no per-cause test rejects at ``alpha``.

    With ``bonferroni`` each test uses ``alpha / m``. When ``causes`` and
    ``zhat`` are supplied the power note is simulated; otherwise it records
    that power is unknown.
    """
    pvalues = [r.pvalue if isinstance(r, CITestResult) else float(r) for r in results]
    if not pvalues:
        raise ValueError("need one test result per cause")
    level = alpha / len(pvalues) if bonferroni else alpha
    decision = "PASS" if all(p > level for p in pvalues) else "FAIL"
    if causes is not None and zhat is not None:
        note = power_analysis(causes, zhat, level, seed, **(power_kwargs or {}))
    else:
        note = {"min_detectable_strength": math.inf, "measure": "not simulated: no data supplied"}
    tested = [r for r in results if isinstance(r, CITestResult)]
    return GateReport(
        per_cause_pvalues=pvalues,
        alpha=alpha,
        decision=decision,
        power_note=note,
        n_permutations=tested[0].n_permutations if tested else 0,
        bonferroni=bonferroni,
        approximation=tested[0].approximation if tested else "joint",
        excluded_strata=sorted({s for r in tested for s in r.excluded_strata}, key=str),
    )


def run_gate(causes, zhat, alpha: float = 0.05, n_permutations: int = 199, seed: int = 0, **kwargs) -> GateReport:
    """Run every per-cause test and the decision rule."""
    values, _ = _as_values(causes)
    ss = np.random.SeedSequence(seed).generate_state(values.shape[1] + 1)
    results = [mutual_ci_test(causes, zhat, k, n_permutations, seed=int(ss[k])) for k in range(values.shape[1])]
    return gate_decision(results, alpha, causes, zhat, int(ss[-1]), **kwargs)


class Prop1Result(NamedTuple):
    holds: bool
    independence_gap: float
    cause_gap: float


def prop1_verify_tables(p_axz: np.ndarray, p_y_given_az: np.ndarray, zhat_fn: Callable,
                        tol: float = GAP_TOL) -> Prop1Result:
    """Exact check on arrays.

    ``p_axz`` has shape ``cause_cards + (|X|, |Z|)`` and ``p_y_given_az``
    shape ``cause_cards + (|Z|, |Y|)``; Y(a) has law ``p_y_given_az[a]``
    given Z and is independent of (A, X) given Z.
    """
    cause_cards = p_axz.shape[:-2]
    n_x, n_z = p_axz.shape[-2:]
    m = len(cause_cards)
    # X independent of A given Z
    p_x_a_z = p_axz.reshape(-1, n_x, n_z)
    xz = JointTable([VarSpec("A", p_x_a_z.shape[0]), VarSpec("X", n_x), VarSpec("Z", n_z)], p_x_a_z)
    if independence_gap(xz, [["A"], ["X"]], ["Z"]) > tol:
        raise DagViolation("covariate X is not independent of the causes given Z")

    assignments = list(np.ndindex(*cause_cards))
    strata = {}
    s_of = np.empty((len(assignments), n_x), dtype=np.int64)
    for i, a in enumerate(assignments):
        for x in range(n_x):
            s_of[i, x] = strata.setdefault(zhat_fn(a, x), len(strata))
    n_s = len(strata)
    q = np.zeros((len(assignments), n_s, n_z))  # P(a, s, z)
    for x in range(n_x):
        np.add.at(q, (np.arange(len(assignments)), s_of[:, x]), p_x_a_z[:, x, :])

    p_as = q.sum(axis=2)
    cause_table = JointTable([VarSpec(f"A{k}", c) for k, c in enumerate(cause_cards)] + [VarSpec("S", n_s)],
                             p_as.reshape(cause_cards + (n_s,)))
    cause_gap = independence_gap(cause_table, [[f"A{k}"] for k in range(m)], ["S"])

    f = p_y_given_az.reshape(len(assignments), n_z, -1)  # Y(a) law given z, per intervention
    num = np.einsum("asz,izy->iasy", q, f)
    p_s = p_as.sum(axis=0)
    pos = p_as > 0
    cond = np.where(pos[None, :, :, None], num / np.where(pos, p_as, 1)[None, :, :, None], 0.0)
    marg = num.sum(axis=1) / np.where(p_s > 0, p_s, 1)[None, :, None]
    dev = np.abs(cond - marg[:, None, :, :]) * pos[None, :, :, None]
    po_gap = float(dev.max()) if dev.size else 0.0
    holds = not (cause_gap <= tol and po_gap > tol)
    return Prop1Result(holds, po_gap, cause_gap)


def prop1_verify_population(scm: ScmSpec, zhat_fn: Callable, tol: float = GAP_TOL) -> Prop1Result:
    """Enumerate the structural joint and check the proposition on this model.

    ``zhat_fn(a, x)`` maps a cause tuple and covariate level (``None`` when
    the model has no covariate) to a stratum label.

    Returns ``(holds, independence_gap, cause_gap)``: ``independence_gap`` is
    the largest |P(Y(a) | A, zhat) - P(Y(a) | zhat)| over interventions a,
    and ``holds`` is False only for a counterexample, i.e. causes independent
    given zhat while some Y(a) is not.
    """
    p_az = scm.p_a_given_z_joint() * scm.p_z
    if scm.x is not None:
        p_axz = p_az[..., None, :] * scm.p_x_given_z.T
        fn = zhat_fn
    else:
        p_axz = p_az[..., None, :]
        fn = lambda a, x: zhat_fn(a, None)  # noqa: E731
    return prop1_verify_tables(p_axz, scm.p_y_given_az, fn, tol)
