"""Latent-class factor model for the causes, fit by EM.

The model is P(a, x) = sum_z pi_z prod_k theta_k(a_k | z) [theta_x(x | z)],
i.e. the observed columns are mutually independent given a discrete class.
The fitted class posterior gives the substitute confounder; its MAP is the
reconstruction function zhat(a, x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ZeroLikelihoodRow
from .tables import EPS_NORM, Dataset, JointTable, VarSpec

TIE_RTOL = 1e-12


@dataclass(frozen=True, eq=False)
class LatentClassModel:
    """Mixture of independent categorical columns.

    Attributes
    ----------
    pi : ndarray, shape (L,)
        Class weights.
    theta : tuple of ndarray
        One ``(L, card_k)`` table per cause.
    causes : tuple of VarSpec
        Cause variables, in the column order of ``theta``.
    x, theta_x : optional
        Covariate variable and its ``(L, card_x)`` table.
    """

    pi: np.ndarray
    theta: tuple[np.ndarray, ...]
    causes: tuple[VarSpec, ...]
    x: VarSpec | None = None
    theta_x: np.ndarray | None = None

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        if pi.ndim != 1 or pi.size < 1 or abs(pi.sum() - 1) > EPS_NORM or np.any(pi < 0):
            raise ValueError("pi must be a distribution over at least one class")
        theta = tuple(np.asarray(t, dtype=float) for t in self.theta)
        if len(theta) != len(self.causes):
            raise ValueError("one theta table per cause")
        for t, c in zip(theta + ((self.theta_x,) if self.x else ()), self.causes + ((self.x,) if self.x else ())):
            t = np.asarray(t, dtype=float)
            if t.shape != (pi.size, c.card) or np.any(np.abs(t.sum(axis=1) - 1) > EPS_NORM):
                raise ValueError(f"table for {c.name!r} must be {pi.size} rows of distributions over {c.card} levels")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "causes", tuple(self.causes))
        if self.theta_x is not None:
            object.__setattr__(self, "theta_x", np.asarray(self.theta_x, dtype=float))

    @property
    def n_classes(self) -> int:
        return self.pi.size

    @property
    def columns(self) -> tuple[VarSpec, ...]:
        return self.causes + ((self.x,) if self.x is not None else ())

    def tables(self) -> list[np.ndarray]:
        return list(self.theta) + ([self.theta_x] if self.theta_x is not None else [])

    def n_params(self) -> int:
        return (self.n_classes - 1) + self.n_classes * sum(v.card - 1 for v in self.columns)

    def log_joint(self, values) -> np.ndarray:
        """log pi_z + sum_k log theta_k(row_k | z), shape (n, L)."""
        values = np.atleast_2d(np.asarray(values, dtype=np.int64))
        with np.errstate(divide="ignore"):
            out = np.broadcast_to(np.log(self.pi), (values.shape[0], self.n_classes)).copy()
            for j, t in enumerate(self.tables()):
                out += np.log(t.T[values[:, j]])
        return out

    def loglik(self, values, weights=None) -> float:
        lj = self.log_joint(values)
        per_row = logsumexp(lj, axis=1)
        w = np.ones(len(per_row)) if weights is None else np.asarray(weights, dtype=float)
        return float(np.dot(w, per_row))

    def permute(self, perm: Sequence[int]) -> "LatentClassModel":
        """Relabel classes: new class ``i`` is old class ``perm[i]``."""
        perm = list(perm)
        return LatentClassModel(
            self.pi[perm], tuple(t[perm] for t in self.theta), self.causes,
            self.x, None if self.theta_x is None else self.theta_x[perm],
        )

    def implied_joint(self, latent_name: str = "Z") -> JointTable:
        """Population joint over (causes, [x], class) implied by the model."""
        arr = self.pi.copy()
        for t in reversed(self.tables()):
            arr = t.T.reshape((t.shape[1],) + (1,) * (arr.ndim - 1) + (self.n_classes,)) * arr[None]
        return JointTable(list(self.columns) + [VarSpec(latent_name, self.n_classes)], arr)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """(values, classes) for ``n`` draws from the model."""
        z = rng.choice(self.n_classes, size=n, p=self.pi)
        cols = []
        for t in self.tables():
            u = rng.random(n)
            cdf = np.cumsum(t[z], axis=1)
            cols.append(np.minimum((u[:, None] >= cdf).sum(axis=1), t.shape[1] - 1))
        return np.column_stack(cols), z

    def to_dict(self):
        d = {
            "causes": [c.to_dict() for c in self.causes],
            "pi": self.pi.tolist(),
            "theta": [t.tolist() for t in self.theta],
        }
        if self.x is not None:
            d["x"] = self.x.to_dict()
            d["theta_x"] = self.theta_x.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "LatentClassModel":
        x = VarSpec(d["x"]["name"], d["x"]["card"]) if d.get("x") else None
        return cls(
            pi=d["pi"],
            theta=tuple(np.asarray(t) for t in d["theta"]),
            causes=tuple(VarSpec(c["name"], c["card"]) for c in d["causes"]),
            x=x,
            theta_x=np.asarray(d["theta_x"]) if x else None,
        )


@dataclass
class FitReport:
    """Diagnostics from :func:`em_fit`. ``loglik_trace`` has one list per restart."""

    loglik_trace: list[list[float]]
    n_restarts: int
    best_restart_index: int
    converged: bool
    final_loglik: float
    n_iter: int
    floor: float
    restart_converged: list[bool] = field(default_factory=list)

    def to_dict(self):
        return {
            "loglik_trace": self.loglik_trace,
            "n_restarts": self.n_restarts,
            "best_restart_index": self.best_restart_index,
            "converged": self.converged,
            "final_loglik": self.final_loglik,
            "n_iter": self.n_iter,
            "floor": self.floor,
            "restart_converged": self.restart_converged,
        }


def _m_step(values, weights, resp, cards, floor):
    wr = resp * weights[:, None]
    pi = wr.sum(axis=0) / wr.sum()
    tables = []
    for j, card in enumerate(cards):
        counts = np.zeros((resp.shape[1], card))
        np.add.at(counts.T, values[:, j], wr)
        t = counts / counts.sum(axis=1, keepdims=True).clip(min=np.finfo(float).tiny)
        if np.any(t < floor):
            t = np.maximum(t, floor)
            t /= t.sum(axis=1, keepdims=True)
        tables.append(t)
    return pi, tables


def _e_step(values, weights, pi, tables):
    with np.errstate(divide="ignore"):
        lj = np.broadcast_to(np.log(pi), (values.shape[0], pi.size)).copy()
        for j, t in enumerate(tables):
            lj += np.log(t.T[values[:, j]])
    norm = logsumexp(lj, axis=1)
    resp = np.exp(lj - norm[:, None])
    return resp, float(np.dot(weights, norm))


def _run_em(values, weights, cards, n_classes, rng, tol, max_iter, floor):
    resp = rng.dirichlet(np.ones(n_classes), size=values.shape[0])
    trace = []
    converged = False
    pi = tables = None
    for _ in range(max_iter):
        pi, tables = _m_step(values, weights, resp, cards, floor)
        resp, ll = _e_step(values, weights, pi, tables)
        trace.append(ll)
        if len(trace) >= 2 and trace[-1] - trace[-2] < tol:
            converged = True
            break
    return pi, tables, trace, converged


def _compress(values, weights):
    uniq, inverse = np.unique(values, axis=0, return_inverse=True)
    w = np.bincount(inverse.ravel(), weights=weights, minlength=uniq.shape[0])
    keep = w > 0
    return uniq[keep], w[keep]


def em_fit(
    data: Dataset,
    n_classes: int,
    *,
    causes: Sequence[str] | None = None,
    covariate: str | None = None,
    weights=None,
    restarts: int = 5,
    tol: float = 1e-8,
    max_iter: int = 2000,
    seed: int = 0,
    floor: float = 1e-12,
) -> tuple[LatentClassModel, FitReport]:
    """Fit a latent-class model by EM with random restarts.

    Parameters
    ----------
    data : Dataset
        Integer-coded units. Columns not named in ``causes`` or
        ``covariate`` are ignored.
    n_classes : int
        Number of latent classes L.
    causes : sequence of str, optional
        Defaults to every column except ``covariate``.
    weights : array_like, optional
        Per-row weights (e.g. cell probabilities of a population table).
    restarts, tol, max_iter, seed, floor
        Each restart starts from Dirichlet(1) responsibilities; a run stops
        when the log-likelihood gains less than ``tol``. Theta entries are
        floored at ``floor`` and renormalized.

    Returns
    -------
    (LatentClassModel, FitReport)
        The restart with the highest final log-likelihood (lowest index on
        ties). Non-convergence is reported, not raised.
    """
    if n_classes < 1:
        raise ValueError("n_classes must be at least 1")
    if len(data) == 0:
        raise ValueError("cannot fit an empty dataset")
    if causes is None:
        causes = [n for n in data.names if n != covariate]
    cols = list(causes) + ([covariate] if covariate else [])
    sub = data.select(cols)
    cards = [v.card for v in sub.vars]
    w = np.ones(len(sub)) if weights is None else np.asarray(weights, dtype=float)
    values, w = _compress(sub.values, w)

    best = None
    traces, flags = [], []
    children = np.random.SeedSequence(seed).spawn(restarts)
    for r, child in enumerate(children):
        pi, tables, trace, conv = _run_em(values, w, cards, n_classes, np.random.default_rng(child), tol, max_iter, floor)
        traces.append(trace)
        flags.append(conv)
        if best is None or trace[-1] > best[0]:
            best = (trace[-1], r, pi, tables)
    ll, r, pi, tables = best
    ncause = len(causes)
    model = LatentClassModel(
        pi, tuple(tables[:ncause]), tuple(sub.vars[:ncause]),
        sub.vars[ncause] if covariate else None, tables[ncause] if covariate else None,
    )
    report = FitReport(traces, restarts, r, flags[r], ll, len(traces[r]), floor, flags)
    return model, report


def em_fit_table(table: JointTable, n_classes: int, causes: Sequence[str], covariate: str | None = None, **kwargs):
    """Fit to an exact population table by weighting each cell by its probability."""
    cols = list(causes) + ([covariate] if covariate else [])
    sub = table.transpose(cols + [n for n in table.names if n not in cols])
    arr = sub.probs.reshape(sub.shape[:len(cols)] + (-1,)).sum(axis=-1)
    idx = np.array(list(np.ndindex(*arr.shape)), dtype=np.int64)
    ds = Dataset(tuple(sub.vars[:len(cols)]), idx)
    return em_fit(ds, n_classes, causes=causes, covariate=covariate, weights=arr.ravel(), **kwargs)


def posterior_matrix(model: LatentClassModel, values) -> np.ndarray:
    """Class posteriors for many rows, shape (n, L)."""
    lj = model.log_joint(values)
    norm = logsumexp(lj, axis=1)
    bad = ~np.isfinite(norm)
    if bad.any():
        raise ZeroLikelihoodRow(f"rows {np.flatnonzero(bad)[:5].tolist()} have zero likelihood under every class")
    return np.exp(lj - norm[:, None])


def posterior_z(model: LatentClassModel, row) -> np.ndarray:
    """Bayes posterior over classes for one row of cause [and covariate] values."""
    return posterior_matrix(model, np.asarray(row)[None])[0]


def _map(post):
    # lowest index among classes within TIE_RTOL of the maximum
    top = post.max(axis=1, keepdims=True)
    return np.argmax(post >= top * (1 - TIE_RTOL), axis=1)


def zhat(model: LatentClassModel, row) -> int:
    """MAP class for a row; ties go to the lowest class index."""
    return int(_map(posterior_z(model, row)[None])[0])


def zhat_many(model: LatentClassModel, values) -> np.ndarray:
    return _map(posterior_matrix(model, values))


def zhat_function(model: LatentClassModel) -> Callable:
    """zhat as a function ``f(a, x=None) -> int`` over cause tuples."""
    def f(a, x=None):
        row = tuple(a) + ((x,) if model.x is not None else ())
        return zhat(model, row)
    return f


def mean_pairwise_correlation(values) -> float:
    """Average absolute Pearson correlation over pairs of columns.

    Constant columns contribute zero.
    """
    values = np.asarray(values, dtype=float)
    p = values.shape[1]
    if p < 2:
        return 0.0
    sd = values.std(axis=0)
    centered = values - values.mean(axis=0)
    total = 0.0
    for i in range(p):
        for j in range(i + 1, p):
            if sd[i] > 0 and sd[j] > 0:
                total += abs(np.mean(centered[:, i] * centered[:, j]) / (sd[i] * sd[j]))
    return total / (p * (p - 1) / 2)


def predictive_check(model: LatentClassModel, values, statistic: Callable, n_rep: int = 200, seed: int = 0) -> float:
    """Fraction of replicated datasets whose statistic is >= the observed one.

    Replicates are drawn from the fitted model with the same number of rows.
    """
    values = np.asarray(values)
    observed = statistic(values)
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(n_rep):
        rep, _ = model.sample(values.shape[0], rng)
        if statistic(rep) >= observed:
            hits += 1
    return hits / n_rep


def bic_table(data: Dataset, class_range: Sequence[int], **fit_kwargs) -> list[dict]:
    """Log-likelihood and BIC for each L in ``class_range``."""
    n = len(data) if fit_kwargs.get("weights") is None else float(np.sum(fit_kwargs["weights"]))
    rows = []
    for L in class_range:
        model, report = em_fit(data, L, **fit_kwargs)
        k = model.n_params()
        rows.append({
            "n_classes": L,
            "loglik": report.final_loglik,
            "n_params": k,
            "bic": -2 * report.final_loglik + k * math.log(n),
            "converged": report.converged,
        })
    return rows
