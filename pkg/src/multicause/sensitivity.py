"""Sharp bounds over the unidentified outcome copula.

For a fixed cause value a, the observed data pin down P(Y | A = a) and (via
the factor model) P(Z | A = a) and P(Z), but not how Y and Z are coupled
given A = a. Every coupling q(y, z) with those two margins is compatible with
the data, and the estimand

    sum_y g(y) sum_z P(z) q(y, z) / P(z | A = a)

is linear in q, so its range over the transportation polytope is an LP.
Latent levels with P(z | A = a) = 0 leave P(Y | a, z) completely free and
contribute P(z) * [min g, max g] (Manski-style). A budget on the L1 distance
between q and the independence coupling interpolates between the point at
the naive value (budget 0) and the full region (budget >= 2).
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import InfeasibleMargins
from .factor import LatentClassModel, posterior_matrix, zhat_many
from .scm import ScmSpec, full_joint, ground_truth_po, _levels
from .simplex import linprog
from .tables import Dataset, JointTable, VarSpec, conditional_array, marginalize

MARGIN_TOL = 1e-9
VERTEX_ENUM_MAX_CELLS = 16


@dataclass(frozen=True)
class FrechetPolytope:
    """Couplings q(y, z) of ``margin_y`` and ``margin_z`` for one cause value."""

    margin_y: np.ndarray
    margin_z: np.ndarray
    a: tuple = ()

    def __post_init__(self):
        for name in ("margin_y", "margin_z"):
            m = np.asarray(getattr(self, name), dtype=float)
            if m.ndim != 1 or np.any(m < 0) or abs(m.sum() - 1) > MARGIN_TOL:
                raise InfeasibleMargins(f"{name} is not a probability vector: {m}")
            object.__setattr__(self, name, m / m.sum())

    @property
    def support(self) -> np.ndarray:
        return self.margin_z > 0

    def constraints(self):
        """Equality system over the supported columns, q flattened row-major (y, z)."""
        zs = np.flatnonzero(self.support)
        r, c = self.margin_y.size, zs.size
        A = np.zeros((r + c, r * c))
        for i in range(r):
            A[i, i * c:(i + 1) * c] = 1
        for j in range(c):
            A[r + j, j::c] = 1
        return A, np.concatenate([self.margin_y, self.margin_z[zs]])

    def conditional_constraints(self, exact: bool = False):
        """The same polytope in r(y, z) = q(y, z) / margin_z(z) over supported z.

        Rows: sum_z margin_z(z) r(y, z) = margin_y(y) for every y except the
        most probable one, then sum_y r(y, z) = 1. The omitted row is implied
        by the others; keeping it would leave the system rank deficient.
        Solving in r keeps the objective well scaled when some margin_z(z)
        is tiny but P(z) is not.

        With ``exact`` the entries are :class:`fractions.Fraction` and both
        margins are renormalized to sum to exactly one, so r = margin_y in
        every column (independence) satisfies the rows exactly.
        """
        my, mz = self.margin_y, self.margin_z[self.support]
        if exact:
            my, mz = _exact_simplex_vector(my), _exact_simplex_vector(mz)
        r, c = my.size, mz.size
        drop = int(np.argmax(self.margin_y))
        kept = [i for i in range(r) if i != drop]
        A = np.zeros((r - 1 + c, r * c), dtype=object if exact else float)
        for row, i in enumerate(kept):
            A[row, i * c:(i + 1) * c] = mz
        for j in range(c):
            A[r - 1 + j, j::c] = 1
        return A, np.concatenate([my[kept], np.ones(c, dtype=int)]).astype(A.dtype)

    def independence(self) -> np.ndarray:
        return np.outer(self.margin_y, self.margin_z)


@dataclass
class IgnoranceRegion:
    """Lower/upper bound of a linear functional of P(Y(a)) with the couplings attaining them."""

    estimand: str
    lower: float
    upper: float
    attained_q_lower: np.ndarray
    attained_q_upper: np.ndarray
    solver: str
    budget: float | None = None
    manski: tuple[float, float] = (0.0, 0.0)
    sharp: bool = True

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float, tol: float = 1e-9) -> bool:
        return self.lower - tol <= value <= self.upper + tol

    def digest(self) -> str:
        payload = json.dumps([_fmt(v) for v in np.concatenate([self.attained_q_lower.ravel(),
                                                               self.attained_q_upper.ravel()])])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self):
        return {
            "estimand": self.estimand,
            "budget": _budget_out(self.budget),
            "lower": self.lower,
            "upper": self.upper,
            "solver": self.solver,
            "manski": list(self.manski),
            "sharp": self.sharp,
            "attained_q_lower": self.attained_q_lower.tolist(),
            "attained_q_upper": self.attained_q_upper.tolist(),
            "attained_q_digest": self.digest(),
        }

    @classmethod
    def from_dict(cls, d) -> "IgnoranceRegion":
        return cls(
            estimand=d["estimand"],
            lower=d["lower"],
            upper=d["upper"],
            attained_q_lower=np.asarray(d["attained_q_lower"]),
            attained_q_upper=np.asarray(d["attained_q_upper"]),
            solver=d["solver"],
            budget=_budget_in(d["budget"]),
            manski=tuple(d["manski"]),
            sharp=d["sharp"],
        )


def _fmt(v):
    return float(f"{v:.12g}")


def _budget_out(b):
    if b is None:
        return None
    return "inf" if math.isinf(b) else b


def _budget_in(b):
    if b is None:
        return None
    return math.inf if b == "inf" else float(b)


def estimand_value(q, margin_z, prior_z, g, side: str = "lower") -> float:
    """Value of the functional at coupling ``q`` (shape |Y| x |Z|).

    Unsupported latent levels contribute their Manski extreme for ``side``.
    """
    q, margin_z, prior_z, g = (np.asarray(v, dtype=float) for v in (q, margin_z, prior_z, g))
    sup = margin_z > 0
    inner = (g @ q[:, sup]) / margin_z[sup]
    extreme = g.min() if side == "lower" else g.max()
    return float(prior_z[sup] @ inner + prior_z[~sup].sum() * extreme)


def _exact_simplex_vector(v):
    v = [Fraction(float(x)) for x in v]
    total = sum(v)
    return np.array([x / total for x in v], dtype=object)


def _objective(poly, prior_z, g):
    """Coefficients of r(y, z) in the functional."""
    return np.outer(g, prior_z[poly.support]).ravel()


def _embed(poly, r_flat):
    q = np.zeros((poly.margin_y.size, poly.margin_z.size))
    q[:, poly.support] = r_flat.reshape(poly.margin_y.size, -1) * poly.margin_z[poly.support]
    return q


def _check_inputs(margin_y, margin_z, prior_z, g, support_mask):
    poly = FrechetPolytope(margin_y, margin_z)
    prior_z = np.asarray(prior_z, dtype=float)
    if prior_z.shape != poly.margin_z.shape or np.any(prior_z < 0) or abs(prior_z.sum() - 1) > MARGIN_TOL:
        raise InfeasibleMargins("prior_z must be a distribution over the latent levels")
    g = np.asarray(g, dtype=float)
    if g.shape != poly.margin_y.shape:
        raise ValueError("estimand weights must have one entry per outcome level")
    if support_mask is not None and not np.array_equal(np.asarray(support_mask, bool), poly.support):
        raise InfeasibleMargins("support_mask disagrees with the positive cells of margin_z")
    return poly, prior_z, g


def _manski(poly, prior_z, g):
    rest = prior_z[~poly.support].sum()
    return rest * g.min(), rest * g.max()


def _vertex_enumeration(poly, obj):
    A, b = poly.conditional_constraints()
    n = A.shape[1]
    if n > VERTEX_ENUM_MAX_CELLS:
        raise ValueError(f"vertex enumeration is limited to {VERTEX_ENUM_MAX_CELLS} cells")
    rank = np.linalg.matrix_rank(A)
    best_lo = best_hi = None
    for cols in itertools.combinations(range(n), rank):
        sub = A[:, cols]
        if np.linalg.matrix_rank(sub) < rank:
            continue
        sol = np.linalg.lstsq(sub, b, rcond=None)[0]
        if np.abs(sub @ sol - b).max() > 1e-10 or sol.min() < -1e-12:
            continue
        x = np.zeros(n)
        x[list(cols)] = np.clip(sol, 0, None)
        val = obj @ x
        if best_lo is None or val < best_lo[0]:
            best_lo = (val, x)
        if best_hi is None or val > best_hi[0]:
            best_hi = (val, x)
    return best_lo[1], best_hi[1]


def _region(poly, prior_z, g, obj, r_lo, r_hi, solver, budget, estimand):
    manski = _manski(poly, prior_z, g)
    return IgnoranceRegion(
        estimand=estimand,
        lower=float(obj @ r_lo + manski[0]),
        upper=float(obj @ r_hi + manski[1]),
        attained_q_lower=_embed(poly, r_lo),
        attained_q_upper=_embed(poly, r_hi),
        solver=solver,
        budget=budget,
        manski=manski,
    )


def copula_bounds(margin_y, margin_z, prior_z, g, support_mask=None, *, solver: str = "simplex",
                  estimand: str = "linear") -> IgnoranceRegion:
    """Range of sum_y g(y) P(Y(a) = y) over all couplings of the two margins.

    Parameters
    ----------
    margin_y : P(Y | A = a)
    margin_z : P(Z | A = a)
    prior_z : P(Z)
    g : weights defining the linear functional (e.g. levels for the mean,
        an indicator for a cell probability)
    support_mask : optional; must equal ``margin_z > 0`` when given
    solver : ``"simplex"`` or ``"vertex-enum"`` (small instances only)
    """
    poly, prior_z, g = _check_inputs(margin_y, margin_z, prior_z, g, support_mask)
    obj = _objective(poly, prior_z, g)
    if solver == "simplex":
        A, b = poly.conditional_constraints(exact=True)
        lo = linprog(obj, A, b).x
        hi = linprog(-obj, A, b).x
    elif solver == "vertex-enum":
        lo, hi = _vertex_enumeration(poly, obj)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    return _region(poly, prior_z, g, obj, lo, hi, solver, math.inf, estimand)


def calibrated_bounds(margin_y, margin_z, prior_z, g, budget: float, support_mask=None, *,
                      estimand: str = "linear") -> IgnoranceRegion:
    """Bounds over couplings within L1 distance ``budget`` of the independence coupling.

    The constraint is sum |q(y, z) - P(y | a) P(z | a)| <= budget, so 0 gives
    the independence point and 2 (the largest possible distance) gives
    :func:`copula_bounds`. Budget 0 is a single coupling and is returned
    exactly; positive budgets are honored up to the solver's pivot tolerance.
    """
    if budget < 0 or math.isnan(budget):
        raise ValueError("budget must be non-negative")
    if math.isinf(budget):
        return copula_bounds(margin_y, margin_z, prior_z, g, support_mask, estimand=estimand)
    poly, prior_z, g = _check_inputs(margin_y, margin_z, prior_z, g, support_mask)
    obj = _objective(poly, prior_z, g)
    nz = int(poly.support.sum())
    r0 = np.repeat(poly.margin_y, nz)
    if budget == 0:
        return _region(poly, prior_z, g, obj, r0, r0, "simplex", 0.0, estimand)
    A, _ = poly.conditional_constraints(exact=True)
    n = A.shape[1]
    r0_exact = np.tile(_exact_simplex_vector(poly.margin_y)[:, None], (1, nz)).ravel()
    mz = np.tile(_exact_simplex_vector(poly.margin_z[poly.support]), poly.margin_y.size)
    # r = r0 + u - v with 0 <= v <= r0, 0 <= u <= 1 - r0 and sum margin_z * (u + v) <= budget;
    # r0 satisfies the equalities exactly, so u - v lies in the null space of A
    A_eq = np.hstack([A, -A])
    b_eq = np.zeros(A.shape[0], dtype=int)
    A_ub = np.concatenate([mz, mz])[None]
    upper = np.concatenate([1 - r0_exact, r0_exact])
    ends = []
    for sign in (1, -1):
        res = linprog(np.concatenate([sign * obj, -sign * obj]), A_eq, b_eq, A_ub, [budget], upper)
        ends.append(np.clip(r0 + res.x[:n] - res.x[n:], 0.0, 1.0))
    lo, hi = ends
    return _region(poly, prior_z, g, obj, lo, hi, "simplex", float(budget), estimand)


def contrast_bounds(region_1: IgnoranceRegion, region_0: IgnoranceRegion) -> tuple[float, float]:
    """Bounds on E_g[Y(a1)] - E_g[Y(a0)].

    Couplings for different cause values are unconstrained relative to each
    other, so the difference of the two intervals is attained.
    """
    return region_1.lower - region_0.upper, region_1.upper - region_0.lower


def ratio_bounds(numerator: IgnoranceRegion, denominator: IgnoranceRegion) -> dict:
    """Conservative interval for a ratio of two positive functionals (not sharp)."""
    if denominator.lower <= 0:
        raise ValueError("denominator interval must be strictly positive")
    cands = [numerator.lower / denominator.upper, numerator.lower / denominator.lower,
             numerator.upper / denominator.upper, numerator.upper / denominator.lower]
    return {"lower": min(cands), "upper": max(cands), "sharp": False}


def _dependence_l1(p_as: np.ndarray, cause_cards: Sequence[int]) -> list[float]:
    """Per cause k: sum_s P(s) * L1(P(a_k, a_-k | s), P(a_k | s) P(a_-k | s)).

    ``p_as`` has shape ``cause_cards + (S,)``.
    """
    m = len(cause_cards)
    out = []
    p_s = p_as.reshape(-1, p_as.shape[-1]).sum(axis=0)
    for k in range(m):
        moved = np.moveaxis(p_as, k, 0).reshape(cause_cards[k], -1, p_as.shape[-1])
        total = 0.0
        for s in np.flatnonzero(p_s > 0):
            joint = moved[:, :, s] / p_s[s]
            prod = np.outer(joint.sum(axis=1), joint.sum(axis=0))
            total += p_s[s] * np.abs(joint - prod).sum()
        out.append(float(total))
    return out


def benchmark_budget(source, zhat_fn=None, *, zhat=None, causes: Sequence[str] | None = None) -> float:
    """Calibration anchor: the strongest dependence of any cause on the rest, given zhat.

    Measured as the stratum-weighted L1 distance between P(A_k, A_-k | zhat)
    and its independence product, maximized over k, in the same units as
    the ``budget`` of :func:`calibrated_bounds`.

    Parameters
    ----------
    source : ScmSpec (exact) or Dataset (plug-in frequencies)
    zhat_fn : for an ScmSpec, ``f(a, x) -> stratum``; ``None`` stratifies on
        the true Z
    zhat : for a Dataset, per-row stratum labels
    causes : for a Dataset, cause column names (default: all columns)
    """
    if isinstance(source, ScmSpec):
        cards = source.cause_cards
        if len(cards) < 2:
            raise ValueError("need at least two causes")
        p_az = source.p_a_given_z_joint() * source.p_z
        if zhat_fn is None:
            return max(_dependence_l1(p_az, cards))
        if source.x is not None:
            p_axz = p_az[..., None, :] * source.p_x_given_z.T
        else:
            p_axz = p_az[..., None, :]
        p_ax = p_axz.sum(axis=-1)
        labels: dict = {}
        cells = []
        for idx in np.ndindex(*p_ax.shape):
            a, x = idx[:-1], idx[-1]
            s = labels.setdefault(zhat_fn(a, x if source.x is not None else None), len(labels))
            cells.append((a, s, p_ax[idx]))
        p_as = np.zeros(tuple(cards) + (len(labels),))
        for a, s, p in cells:
            p_as[a + (s,)] += p
        return max(_dependence_l1(p_as, cards))
    if isinstance(source, Dataset):
        sub = source.select(causes) if causes is not None else source
        cards = [v.card for v in sub.vars]
        if len(cards) < 2:
            raise ValueError("need at least two causes")
        if zhat is None:
            zhat = np.zeros(len(sub), dtype=int)
        _, s = np.unique(np.asarray(zhat), return_inverse=True)
        s = s.ravel()
        flat = np.ravel_multi_index(tuple(sub.values.T) + (s,), tuple(cards) + (s.max() + 1,))
        counts = np.bincount(flat, minlength=math.prod(cards) * (s.max() + 1))
        p_as = (counts / counts.sum()).reshape(tuple(cards) + (s.max() + 1,))
        return max(_dependence_l1(p_as, cards))
    raise TypeError("source must be an ScmSpec or a Dataset")


@dataclass
class SensitivityReport:
    a: tuple
    g: list
    naive: float
    benchmark: float
    regions: list[IgnoranceRegion]
    truth: float | None = None
    zhat_source: str = "true"
    monotone: bool = True
    margins: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "a": list(self.a),
            "g": list(self.g),
            "zhat_source": self.zhat_source,
            "naive": self.naive,
            "truth": self.truth,
            "benchmark_budget": self.benchmark,
            "monotone_widths": self.monotone,
            "margins": self.margins,
            "rows": [r.to_dict() for r in self.regions],
        }

    @classmethod
    def from_dict(cls, d) -> "SensitivityReport":
        return cls(
            a=tuple(d["a"]),
            g=list(d["g"]),
            naive=d["naive"],
            benchmark=d["benchmark_budget"],
            regions=[IgnoranceRegion.from_dict(r) for r in d["rows"]],
            truth=d["truth"],
            zhat_source=d["zhat_source"],
            monotone=d["monotone_widths"],
            margins=d["margins"],
        )

    def csv_rows(self):
        rows = [["budget", "lower", "upper", "solver", "attained_q_digest"]]
        for r in self.regions:
            rows.append([_budget_out(r.budget), _fmt(r.lower), _fmt(r.upper), r.solver, r.digest()])
        rows.append(["benchmark", _fmt(self.benchmark), "", "", ""])
        return rows

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.csv_rows())


def _conditional_y(joint: JointTable, causes, outcome, a) -> np.ndarray:
    cond, ok = conditional_array(joint, [outcome], causes)
    if not ok[a]:
        raise InfeasibleMargins(f"P(A = {a}) = 0: no observable outcome margin")
    return cond[a]


def sensitivity_report(source, a, budgets: Sequence[float], *, zhat="true", g=None,
                       hidden_z=None, outcome: str | None = None,
                       causes: Sequence[str] | None = None) -> SensitivityReport:
    """Ignorance regions for E_g[Y(a)] across dependence budgets.

    Parameters
    ----------
    source : ScmSpec (exact margins) or Dataset (plug-in margins)
    a : cause assignment
    budgets : L1 budgets; ``math.inf`` is the unrestricted region. The full
        region is always appended if missing.
    zhat : ``"true"`` to use the real latent (from the model, or
        ``hidden_z`` for data), or a fitted LatentClassModel whose posterior
        supplies P(Z | A = a) and whose MAP supplies the benchmark strata
    g : outcome weights, default the level values (mean of Y)
    """
    budgets = sorted(set(float(b) for b in budgets) | {math.inf})
    if isinstance(source, ScmSpec):
        a = _levels(source, a)
        outcome = source.y.name
        causes = source.cause_names
        joint = marginalize(full_joint(source), list(causes) + [outcome, source.z.name])
        margin_y = _conditional_y(joint, causes, outcome, a)
        g = np.arange(source.y.card, dtype=float) if g is None else np.asarray(g, dtype=float)
        truth = float(g @ ground_truth_po(source, a).dist)
        if isinstance(zhat, LatentClassModel):
            margin_z, prior_z = _model_margins(zhat, a)
            zfn = _zhat_fn_for(zhat)
            benchmark = benchmark_budget(source, zfn)
            src = "fitted"
        else:
            margin_z = conditional_array(joint, [source.z.name], causes)[0][a]
            prior_z = marginalize(joint, [source.z.name]).probs
            benchmark = benchmark_budget(source)
            src = "true"
    elif isinstance(source, Dataset):
        outcome = outcome or "Y"
        causes = tuple(causes) if causes is not None else tuple(n for n in source.names if n not in (outcome, "X"))
        a = tuple(int(v) for v in (a.values() if isinstance(a, dict) else a))
        joint = source.empirical_joint(list(causes) + [outcome])
        margin_y = _conditional_y(joint, causes, outcome, a)
        g = np.arange(source.var(outcome).card, dtype=float) if g is None else np.asarray(g, dtype=float)
        truth = None
        values = source.select(causes).values
        if isinstance(zhat, LatentClassModel):
            margin_z, prior_z = _model_margins(zhat, a)
            labels = zhat_many(_causes_only(zhat), values)
            src = "fitted"
        else:
            if hidden_z is None:
                raise ValueError("zhat='true' on data needs the hidden_z column")
            hz = np.asarray(hidden_z)
            n_z = int(hz.max()) + 1
            zvar = VarSpec("__Z", n_z)
            ds = Dataset(tuple(source.select(causes).vars) + (zvar,), np.column_stack([values, hz]))
            jz = ds.empirical_joint()
            margin_z = _conditional_y(jz, causes, "__Z", a)
            prior_z = marginalize(jz, ["__Z"]).probs
            labels = hz
            src = "true"
        benchmark = benchmark_budget(source.select(causes), zhat=labels)
    else:
        raise TypeError("source must be an ScmSpec or a Dataset")

    regions = [calibrated_bounds(margin_y, margin_z, prior_z, g, b) for b in budgets]
    widths = [r.width for r in regions]
    monotone = all(w2 >= w1 - 1e-9 for w1, w2 in zip(widths, widths[1:]))
    return SensitivityReport(
        a=tuple(a), g=g.tolist(), naive=float(g @ margin_y), benchmark=benchmark, regions=regions,
        truth=truth, zhat_source=src, monotone=monotone,
        margins={"margin_y": list(map(float, margin_y)), "margin_z": list(map(float, margin_z)),
                 "prior_z": list(map(float, prior_z))},
    )


def _causes_only(model: LatentClassModel) -> LatentClassModel:
    return LatentClassModel(model.pi, model.theta, model.causes)


def _model_margins(model: LatentClassModel, a) -> tuple[np.ndarray, np.ndarray]:
    """Model-implied P(Z | A = a) (covariate summed out) and P(Z)."""
    post = posterior_matrix(_causes_only(model), np.asarray(a)[None])[0]
    return post, model.pi.copy()


def _zhat_fn_for(model: LatentClassModel):
    def f(a, x):
        row = tuple(a) + ((x,) if model.x is not None and x is not None else ())
        m = model if (model.x is not None and x is not None) else _causes_only(model)
        return int(zhat_many(m, np.asarray(row)[None])[0])
    return f

