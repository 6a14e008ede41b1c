"""Two-phase primal simplex with Bland's rule and bounded variables.

Sized for the small transportation-type LPs in :mod:`multicause.sensitivity`
(tens of variables). A floating-point pass finds a candidate optimal basis;
that basis is then re-solved in exact rational arithmetic and, if needed,
pivoted to optimality there. The returned point is the exact optimal vertex
of the LP whose data are the given floats, rounded once to float.

The exact pass matters when coefficients span many orders of magnitude
(e.g. a conditional margin of 1e-12 next to ones): a float tableau cannot
tell round-off from a genuine small entry there.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import InfeasibleMargins

PIVOT_TOL = 1e-11
FEAS_TOL = 1e-9


class Unbounded(ArithmeticError):
    pass


@dataclass
class LPResult:
    x: np.ndarray
    fun: float
    n_pivots: int
    exact: bool


class _Restart(Exception):
    """The float basis does not carry over to exact arithmetic."""


def _pivot(T, row, col):
    T[row] = T[row] / T[row, col]
    for i in np.flatnonzero(T[:, col] != 0):
        if i != row:
            T[i] = T[i] - T[i, col] * T[row]


def _complement_basic(T, row, j, ub):
    """Replace basic x_j (in ``row``) by ub_j - x_j."""
    T[row, :-1] = -T[row, :-1]
    T[row, j] = T[row, j] * 0 + 1
    T[row, -1] = ub - T[row, -1]


def _complement_nonbasic(T, j, ub):
    T[:, -1] = T[:, -1] - ub * T[:, j]
    T[:, j] = -T[:, j]


def _iterate(T, basis, flipped, ub, n_cols, tol, max_iter):
    """Minimize with reduced costs in the last row; only columns < n_cols may enter.

    Nonbasic variables sit at zero in complemented coordinates, so a
    variable at its upper bound is stored as ub - x with ``flipped`` set.
    """
    pivots = 0
    m = T.shape[0] - 1
    while True:
        reduced = T[-1, :n_cols]
        candidates = np.flatnonzero(reduced < -tol)
        if candidates.size == 0:
            return pivots
        col = int(candidates[0])  # Bland: lowest index enters
        column = T[:m, col]
        rhs = T[:m, -1]
        best, leave, at_upper = ub[col], None, False
        for i in range(m):
            a = column[i]
            if a > tol:
                ratio = rhs[i] / a
                upper = False
            elif a < -tol and ub[basis[i]] != np.inf:
                ratio = (ub[basis[i]] - rhs[i]) / -a
                upper = True
            else:
                continue
            # ties go to the lowest basic index (Bland)
            if leave is None and ratio < best or leave is not None and (
                    ratio < best - tol or ratio <= best + tol and basis[i] < basis[leave]):
                best, leave, at_upper = ratio, i, upper
        if leave is None:
            if best == np.inf:
                raise Unbounded("objective is unbounded below")
            _complement_nonbasic(T, col, ub[col])
            flipped[col] = not flipped[col]
        else:
            if at_upper:
                _complement_basic(T, leave, basis[leave], ub[basis[leave]])
                flipped[basis[leave]] = not flipped[basis[leave]]
            _pivot(T, leave, col)
            basis[leave] = col
        pivots += 1
        if pivots > max_iter:
            raise RuntimeError("simplex iteration limit reached")


def _standard_form(c, A_eq, b_eq, A_ub, b_ub, upper, dtype):
    """Stack equalities and slacked inequalities; returns (c, A, b, ub) over x and slacks."""
    c = np.asarray(c, dtype=dtype)
    n = c.size
    zero = c.dtype.type(0) if dtype is float else Fraction(0)
    blocks, rhs = [], []
    n_slack = 0 if A_ub is None else np.asarray(A_ub).shape[0]
    if A_eq is not None:
        A = np.atleast_2d(np.asarray(A_eq, dtype=dtype))
        blocks.append(np.hstack([A, np.full((A.shape[0], n_slack), zero, dtype=A.dtype)]))
        rhs.append(np.asarray(b_eq, dtype=dtype))
    if A_ub is not None:
        A = np.atleast_2d(np.asarray(A_ub, dtype=dtype))
        eye = np.full((n_slack, n_slack), zero, dtype=A.dtype)
        np.fill_diagonal(eye, zero + 1)
        blocks.append(np.hstack([A, eye]))
        rhs.append(np.asarray(b_ub, dtype=dtype))
    A = np.vstack(blocks)
    b = np.concatenate(rhs)
    cost = np.concatenate([c, np.full(n_slack, zero, dtype=c.dtype)])
    ub = np.full(n + n_slack, np.inf, dtype=object)
    if upper is not None:
        for j, u in enumerate(upper):
            if u != np.inf:
                ub[j] = float(u) if dtype is float else _exact(u)
    return cost, A, b, ub


def _exact(v):
    return v if isinstance(v, Fraction) else Fraction(float(v))


def _as_exact(a):
    a = np.asarray(a, dtype=object)
    return np.vectorize(_exact, otypes=[object])(a) if a.size else a


def _solve(cost, A, b, ub, tol, max_iter):
    """Two-phase solve from scratch. Returns (x, basis, flipped, kept_rows, pivots)."""
    A = A.copy()
    b = b.copy()
    m, n_tot = A.shape
    neg = b < 0
    A[neg] = -A[neg]
    b[neg] = -b[neg]
    one = b.dtype.type(1) if b.dtype != object else Fraction(1)
    zero = one * 0

    # phase 1: one artificial per row
    T = np.full((m + 1, n_tot + m + 1), zero, dtype=A.dtype)
    T[:m, :n_tot] = A
    for i in range(m):
        T[i, n_tot + i] = one
    T[:m, -1] = b
    T[-1, :n_tot] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(n_tot, n_tot + m))
    ub_all = np.concatenate([ub, np.full(m, np.inf, dtype=object)])
    flipped = np.zeros(n_tot + m, dtype=bool)
    pivots = _iterate(T, basis, flipped, ub_all, n_tot + m, tol, max_iter)
    if -T[-1, -1] > (FEAS_TOL * max(1.0, float(b.sum())) if tol else 0):
        raise InfeasibleMargins(f"constraints are infeasible (phase-one residual {float(-T[-1, -1]):.3g})")

    # drive remaining artificials out; rows where that is impossible are redundant
    keep = []
    scale = float(np.abs(T[:m, :n_tot]).max()) if m else 1.0
    for i in range(m):
        if basis[i] >= n_tot:
            row = np.abs(T[i, :n_tot])
            best = int(np.argmax(row))
            if row[best] > tol * max(1.0, scale):
                _pivot(T, i, best)
                basis[i] = best
                pivots += 1
                keep.append(i)
        else:
            keep.append(i)
    T = np.vstack([T[keep][:, list(range(n_tot)) + [-1]], np.full((1, n_tot + 1), zero, dtype=T.dtype)])
    basis = [basis[i] for i in keep]
    flipped = flipped[:n_tot]

    # phase 2
    _set_objective(T, basis, flipped, cost)
    pivots += _iterate(T, basis, flipped, ub, n_tot, tol, max_iter)
    return _extract(T, basis, flipped, ub), basis, flipped, keep, pivots


def _set_objective(T, basis, flipped, cost):
    signed = np.where(flipped, -cost, cost)
    T[-1, :-1] = signed
    T[-1, -1] = signed[0] * 0
    for i, j in enumerate(basis):
        T[-1] = T[-1] - signed[j] * T[i]


def _extract(T, basis, flipped, ub):
    n_tot = T.shape[1] - 1
    x = np.full(n_tot, T[-1, -1] * 0, dtype=T.dtype)
    for i, j in enumerate(basis):
        x[j] = T[i, -1]
    for j in np.flatnonzero(flipped):
        x[j] = ub[j] - x[j]
    return x


def _warm_exact(cost, A, b, ub, basis, flipped, keep, max_iter):
    """Re-solve the float basis exactly, then continue Bland pivots in rationals."""
    A = A[keep].copy()
    b = b[keep].copy()
    m, n_tot = A.shape
    zero = Fraction(0)
    for j in np.flatnonzero(flipped):
        b = b - ub[j] * A[:, j]
        A[:, j] = -A[:, j]
    T = np.full((m + 1, n_tot + 1), zero, dtype=object)
    T[:m, :n_tot] = A
    T[:m, -1] = b
    rows = list(range(m))
    order = []
    for j in basis:
        cand = [i for i in rows if T[i, j] != 0]
        if not cand:
            raise _Restart
        i = cand[0]
        rows.remove(i)
        _pivot(T[:m], i, j)
        order.append((i, j))
    new_basis = [0] * m
    for i, j in order:
        new_basis[i] = j
    for i, j in enumerate(new_basis):
        if T[i, -1] < 0 or ub[j] != np.inf and T[i, -1] > ub[j]:
            raise _Restart
    flipped = flipped.copy()
    _set_objective(T, new_basis, flipped, cost)
    pivots = _iterate(T, new_basis, flipped, ub, n_tot, 0, max_iter)
    return _extract(T, new_basis, flipped, ub), pivots


def linprog(c, A_eq=None, b_eq=None, A_ub=None, b_ub=None, upper=None, *, exact: bool = True,
            max_iter: int = 10_000) -> LPResult:
    """Minimize ``c @ x`` subject to ``A_eq x = b_eq``, ``A_ub x <= b_ub``, ``0 <= x <= upper``.

    Parameters
    ----------
    c, A_eq, b_eq, A_ub, b_ub : LP data. Entries may be floats or
        :class:`fractions.Fraction`; the exact pass uses them as given.
    upper : optional per-variable upper bounds (``inf`` for none).
    exact : finish in rational arithmetic. With ``False`` the float
        solution is returned as is.

    Raises
    ------
    InfeasibleMargins
        If the constraints admit no solution.
    Unbounded
        If the objective is unbounded below.
    """
    n = len(c)
    cost_f, A_f, b_f, ub_f = _standard_form(c, A_eq, b_eq, A_ub, b_ub, upper, float)
    x, basis, flipped, keep, pivots = _solve(cost_f, A_f, b_f, ub_f, PIVOT_TOL, max_iter)
    if not exact:
        x = np.clip(x, 0.0, ub_f.astype(float))[:n]
        return LPResult(x, float(cost_f[:n] @ x), pivots, False)

    cost, A, b, ub = _standard_form(_as_exact(c), _maybe(A_eq), _maybe(b_eq), _maybe(A_ub), _maybe(b_ub),
                                    upper, object)
    try:
        xq, more = _warm_exact(cost, A, b, ub, basis, flipped, keep, max_iter)
        if any(sum(A[i] * xq) != b[i] for i in range(A.shape[0])):
            raise _Restart  # a row the float pass dropped as redundant is not
    except _Restart:
        xq, _, _, _, more = _solve(cost, A, b, ub, 0, max_iter)
    fun = sum(cost[:n] * xq[:n])
    return LPResult(np.array([float(v) for v in xq[:n]]), float(fun), pivots + more, True)


def _maybe(a):
    return None if a is None else _as_exact(a)
