"""Exact finite probability tables, conditionals and discrete copula densities.

Everything in the package is finite-discrete, so a joint distribution is a
dense array indexed by the cross product of variable levels. Tables are
immutable; every operation returns a new table.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    InconsistentFactors,
    TableTooLarge,
    UnknownVariable,
    ZeroProbabilityEvidence,
)

EPS_NORM = 1e-9
MAX_CELLS = 10**7


@dataclass(frozen=True)
class VarSpec:
    """A named discrete variable with levels ``0 .. card - 1``."""

    name: str
    card: int

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise ValueError(f"variable name must be a non-empty string, got {self.name!r}")
        if int(self.card) != self.card or self.card < 1:
            raise ValueError(f"cardinality of {self.name!r} must be a positive integer")
        object.__setattr__(self, "card", int(self.card))

    def to_dict(self):
        return {"name": self.name, "card": self.card}


def _as_names(group) -> tuple[str, ...]:
    if group is None:
        return ()
    if isinstance(group, str):
        return (group,)
    if isinstance(group, VarSpec):
        return (group.name,)
    return tuple(g.name if isinstance(g, VarSpec) else g for g in group)


def _check_size(cards):
    size = math.prod(cards)
    if size > MAX_CELLS:
        raise TableTooLarge(f"table with {size} cells exceeds the {MAX_CELLS} cell limit")
    return size


class JointTable:
    """Probability table over an ordered list of discrete variables.

    Parameters
    ----------
    vars : sequence of VarSpec
        Variable order; ``probs`` is indexed in this order (row-major).
    probs : array_like
        Either already shaped by the cardinalities or flat of matching size.
    validate : bool
        Check non-negativity and normalization to within ``EPS_NORM``.
    """

    __slots__ = ("vars", "probs", "_index")

    def __init__(self, vars: Sequence[VarSpec], probs, *, validate: bool = True):
        vars = tuple(vars)
        names = [v.name for v in vars]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in {names}")
        shape = tuple(v.card for v in vars)
        _check_size(shape)
        arr = np.array(probs, dtype=float).reshape(shape)
        if validate:
            if np.any(~np.isfinite(arr)) or np.any(arr < 0):
                raise ValueError("probabilities must be finite and non-negative")
            total = arr.sum()
            if abs(total - 1.0) > EPS_NORM:
                raise ValueError(f"probabilities sum to {total!r}, not 1")
        arr.setflags(write=False)
        self.vars = vars
        self.probs = arr
        self._index = {n: i for i, n in enumerate(names)}

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.vars)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.probs.shape

    def axis(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownVariable(f"{name!r} not in table variables {self.names}") from None

    def var(self, name: str) -> VarSpec:
        return self.vars[self.axis(name)]

    def cards(self, names) -> tuple[int, ...]:
        return tuple(self.var(n).card for n in _as_names(names))

    def prob(self, assignment: Mapping[str, int]) -> float:
        """Probability of a (possibly partial) assignment."""
        return float(marginalize(self, list(assignment)).probs[tuple(assignment.values())])

    def transpose(self, order) -> "JointTable":
        order = _as_names(order)
        if sorted(order) != sorted(self.names):
            raise UnknownVariable(f"order {order} is not a permutation of {self.names}")
        axes = [self.axis(n) for n in order]
        return JointTable([self.vars[i] for i in axes], self.probs.transpose(axes), validate=False)

    def grouped(self, *groups) -> np.ndarray:
        """Array with one flattened axis per group of variables.

        Variables not listed in any group are summed out.
        """
        groups = [_as_names(g) for g in groups]
        flat = [n for g in groups for n in g]
        arr = marginalize(self, flat).probs
        return arr.reshape([math.prod(self.cards(g)) for g in groups])

    def to_dict(self):
        return {"vars": [v.to_dict() for v in self.vars], "probs": self.probs.ravel().tolist()}

    @classmethod
    def from_dict(cls, d) -> "JointTable":
        vars = [VarSpec(v["name"], v["card"]) for v in d["vars"]]
        return cls(vars, d["probs"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "JointTable":
        return cls.from_dict(json.loads(s))

    def allclose(self, other: "JointTable", atol: float = 1e-10) -> bool:
        if sorted(self.names) != sorted(other.names):
            return False
        other = other.transpose(self.names)
        return self.shape == other.shape and bool(np.allclose(self.probs, other.probs, rtol=0, atol=atol))

    def __eq__(self, other):
        if not isinstance(other, JointTable):
            return NotImplemented
        return self.vars == other.vars and np.array_equal(self.probs, other.probs)

    __hash__ = None

    def __repr__(self):
        inner = ", ".join(f"{v.name}:{v.card}" for v in self.vars)
        return f"JointTable({inner})"


def product_table(*tables: JointTable) -> JointTable:
    """Independence product of tables over disjoint variable sets."""
    vars = [v for t in tables for v in t.vars]
    arr = np.ones(())
    for t in tables:
        arr = np.multiply.outer(arr, t.probs)
    return JointTable(vars, arr)


def marginalize(table: JointTable, keep) -> JointTable:
    """Sum ``table`` over every variable not in ``keep``.

    The result's variables follow the order given in ``keep``.
    """
    keep = _as_names(keep)
    axes = [table.axis(n) for n in keep]
    if len(set(axes)) != len(axes):
        raise ValueError(f"repeated variable in {keep}")
    drop = tuple(i for i in range(len(table.vars)) if i not in axes)
    arr = table.probs.sum(axis=drop) if drop else table.probs
    # remaining axes are in table order; put them in `keep` order
    remaining = sorted(axes)
    arr = np.transpose(arr, [remaining.index(i) for i in axes])
    return JointTable([table.vars[i] for i in axes], arr, validate=False)


def condition(table: JointTable, evidence: Mapping[str, int]) -> JointTable:
    """Conditional table of the remaining variables given ``evidence``.

    Raises
    ------
    ZeroProbabilityEvidence
        If the evidence has probability zero.
    """
    index = [slice(None)] * len(table.vars)
    for name, level in evidence.items():
        var = table.var(name)
        if not 0 <= level < var.card:
            raise ValueError(f"level {level} out of range for {name!r}")
        index[table.axis(name)] = int(level)
    sliced = table.probs[tuple(index)]
    mass = sliced.sum()
    if mass <= 0:
        raise ZeroProbabilityEvidence(f"P({dict(evidence)}) = 0")
    rest = [v for v in table.vars if v.name not in evidence]
    return JointTable(rest, sliced / mass, validate=False)


def conditional_array(table: JointTable, target, given=()) -> tuple[np.ndarray, np.ndarray]:
    """P(target | given) as an array of shape ``given_cards + target_cards``.

    Returns ``(cond, positive)`` where ``positive`` marks conditioning cells
    with non-zero mass; rows outside it are filled with NaN on purpose.
    """
    target, given = _as_names(target), _as_names(given)
    joint = marginalize(table, given + target).probs
    g_shape = table.cards(given)
    t_shape = table.cards(target)
    flat = joint.reshape(math.prod(g_shape), math.prod(t_shape))
    mass = flat.sum(axis=1)
    positive = mass > 0
    out = np.full_like(flat, np.nan)
    out[positive] = flat[positive] / mass[positive, None]
    return out.reshape(g_shape + t_shape), positive.reshape(g_shape)


def independence_gap(table: JointTable, groups, given=()) -> float:
    """Max abs difference between P(groups | given) and the product of the
    per-group conditionals, over conditioning cells with positive mass."""
    groups = [_as_names(g) for g in groups]
    given = _as_names(given)
    arr = table.grouped(given, *groups) if given else table.grouped(*groups)[None]
    cmass = arr.reshape(arr.shape[0], -1).sum(axis=1)
    gap = 0.0
    for c in np.flatnonzero(cmass > 0):
        joint = arr[c] / cmass[c]
        prod = np.ones(())
        for ax in range(joint.ndim):
            other = tuple(i for i in range(joint.ndim) if i != ax)
            prod = np.multiply.outer(prod, joint.sum(axis=other))
        gap = max(gap, float(np.abs(joint - prod).max()))
    return gap


def total_variation(p, q) -> float:
    """Half the L1 distance between two distributions on the same support."""
    return 0.5 * float(np.abs(np.asarray(p, float) - np.asarray(q, float)).sum())


class _Undefined:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNDEFINED"

    def __bool__(self):
        return False


#: Marker returned for copula cells whose marginals have zero probability.
UNDEFINED = _Undefined()


@dataclass(frozen=True, eq=False)
class CopulaGrid:
    """Discrete copula density c(v, w | cond).

    ``values`` has shape ``cond_cards + v_cards + w_cards``. Cells where
    either conditional marginal (or the conditioning event) has zero mass are
    UNDEFINED: ``defined`` is False there and ``values`` holds NaN.
    """

    vars_v: tuple[VarSpec, ...]
    vars_w: tuple[VarSpec, ...]
    cond_vars: tuple[VarSpec, ...]
    values: np.ndarray
    defined: np.ndarray

    def __post_init__(self):
        shape = tuple(v.card for v in self.cond_vars + self.vars_v + self.vars_w)
        values = np.asarray(self.values, dtype=float).reshape(shape)
        defined = np.asarray(self.defined, dtype=bool).reshape(shape)
        values = np.where(defined, values, np.nan)
        if np.any(values[defined] < 0) or not np.all(np.isfinite(values[defined])):
            raise ValueError("defined copula values must be finite and non-negative")
        values.setflags(write=False)
        defined.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "defined", defined)

    @classmethod
    def independence(cls, vars_v, vars_w, cond_vars=()) -> "CopulaGrid":
        """The copula identically equal to one."""
        vars_v, vars_w, cond_vars = tuple(vars_v), tuple(vars_w), tuple(cond_vars)
        shape = tuple(v.card for v in cond_vars + vars_v + vars_w)
        return cls(vars_v, vars_w, cond_vars, np.ones(shape), np.ones(shape, dtype=bool))

    def cell(self, cond=(), v=(), w=()):
        idx = tuple(cond) + tuple(v) + tuple(w)
        return float(self.values[idx]) if self.defined[idx] else UNDEFINED

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """(values, defined) reshaped to (n_cond, n_v, n_w)."""
        shape = (
            math.prod(v.card for v in self.cond_vars),
            math.prod(v.card for v in self.vars_v),
            math.prod(v.card for v in self.vars_w),
        )
        return self.values.reshape(shape), self.defined.reshape(shape)

    def reweighted_sum_gap(self, table: JointTable) -> float:
        """Largest violation of sum_v P(v|c) c(v,w|c) = 1 (and symmetrically)
        over cells with P(w|c) > 0 (resp. P(v|c) > 0)."""
        arr = table.grouped(self.cond_vars, self.vars_v, self.vars_w) if self.cond_vars else \
            table.grouped(self.vars_v, self.vars_w)[None]
        vals, ok = self.flat()
        filled = np.where(ok, vals, 0.0)
        gap = 0.0
        for c in range(arr.shape[0]):
            mass = arr[c].sum()
            if mass <= 0:
                continue
            pv = arr[c].sum(axis=1) / mass
            pw = arr[c].sum(axis=0) / mass
            sv = pv @ filled[c]
            sw = filled[c] @ pw
            gap = max(gap, float(np.abs(sv[pw > 0] - 1).max(initial=0)),
                      float(np.abs(sw[pv > 0] - 1).max(initial=0)))
        return gap

    def to_dict(self):
        return {
            "vars_v": [v.to_dict() for v in self.vars_v],
            "vars_w": [v.to_dict() for v in self.vars_w],
            "cond_vars": [v.to_dict() for v in self.cond_vars],
            "values": [float(x) if d else None for x, d in zip(self.values.ravel(), self.defined.ravel())],
        }

    @classmethod
    def from_dict(cls, d) -> "CopulaGrid":
        groups = [tuple(VarSpec(v["name"], v["card"]) for v in d[k]) for k in ("vars_v", "vars_w", "cond_vars")]
        raw = d["values"]
        defined = np.array([x is not None for x in raw])
        values = np.array([np.nan if x is None else x for x in raw], dtype=float)
        return cls(groups[0], groups[1], groups[2], values, defined)


def copula_density(table: JointTable, group_v, group_w, cond_vars=()) -> CopulaGrid:
    """c(v, w | cond) = P(v, w | cond) / (P(v | cond) P(w | cond))."""
    gv, gw, gc = _as_names(group_v), _as_names(group_w), _as_names(cond_vars)
    if set(gv) & set(gw) or set(gc) & (set(gv) | set(gw)):
        raise ValueError("copula variable groups must be disjoint")
    arr = table.grouped(gc, gv, gw) if gc else table.grouped(gv, gw)[None]
    p_c = arr.sum(axis=(1, 2))
    p_cv = arr.sum(axis=2)
    p_cw = arr.sum(axis=1)
    denom = p_cv[:, :, None] * p_cw[:, None, :]
    defined = denom > 0
    values = np.zeros_like(arr)
    # P(v,w|c) / (P(v|c) P(w|c)) = P(c,v,w) P(c) / (P(c,v) P(c,w))
    values[defined] = (arr * p_c[:, None, None])[defined] / denom[defined]
    vars_of = lambda names: tuple(table.var(n) for n in names)  # noqa: E731
    return CopulaGrid(vars_of(gv), vars_of(gw), vars_of(gc), values, defined)


def compose_joint(
    observed: JointTable,
    prior_z: JointTable,
    cz_a: CopulaGrid,
    outcome_copula: CopulaGrid,
) -> JointTable:
    """Rebuild P(A, Y, Z) = P(A, Y) * P(Z) c(Z, A) * c(Y, Z | A).

    Variable roles are read off the copulas: ``cz_a`` is c(Z, A) with Z as
    its ``vars_v`` and the causes as ``vars_w``; ``outcome_copula`` is
    c(Y, Z | A). The result is ordered as ``observed`` followed by Z.

    Raises
    ------
    InconsistentFactors
        If a needed copula cell is UNDEFINED or the product is not a
        distribution whose marginals reproduce ``observed`` and P(A, Z).
    """
    a_names = tuple(v.name for v in cz_a.vars_w)
    z_names = tuple(v.name for v in cz_a.vars_v)
    y_names = tuple(v.name for v in outcome_copula.vars_v)
    if tuple(v.name for v in outcome_copula.cond_vars) != a_names:
        raise InconsistentFactors("outcome copula must condition on the causes of c(Z, A)")
    if tuple(v.name for v in outcome_copula.vars_w) != z_names or prior_z.names != z_names:
        raise InconsistentFactors("latent variables disagree between factors")
    if sorted(observed.names) != sorted(a_names + y_names):
        raise InconsistentFactors(f"observed table {observed.names} is not over causes+outcome")

    p_ay = observed.grouped(a_names, y_names)
    p_z = prior_z.probs.ravel()
    n_a, n_y, n_z = p_ay.shape[0], p_ay.shape[1], p_z.size

    cza, cza_ok = cz_a.flat()
    cza, cza_ok = cza[0].T, cza_ok[0].T  # (A, Z)
    p_a = p_ay.sum(axis=1)
    pre = p_a[:, None] * p_z[None, :]
    if np.any(~cza_ok & (pre > 0)):
        raise InconsistentFactors("c(Z, A) is UNDEFINED on a cell with positive P(A)P(Z)")
    p_z_given_a = np.where(cza_ok, p_z[None, :] * np.where(cza_ok, cza, 0.0), 0.0)

    oc, oc_ok = outcome_copula.flat()  # (A, Y, Z)
    p_y_given_a = np.divide(p_ay, p_a[:, None], out=np.zeros_like(p_ay), where=p_a[:, None] > 0)
    need = (p_y_given_a[:, :, None] * p_z_given_a[:, None, :]) > 0
    if np.any(need & ~oc_ok):
        raise InconsistentFactors("outcome copula is UNDEFINED where P(Y|A) P(Z|A) > 0")
    oc = np.where(oc_ok, oc, 0.0)

    full = p_ay[:, :, None] * p_z_given_a[:, None, :] * oc
    total = full.sum()
    if abs(total - 1.0) > EPS_NORM:
        raise InconsistentFactors(f"composed joint sums to {total!r}")
    if np.abs(full.sum(axis=2) - p_ay).max() > EPS_NORM:
        raise InconsistentFactors("composed joint does not reproduce the observed P(A, Y)")
    if np.abs(full.sum(axis=1) - p_a[:, None] * p_z_given_a).max() > EPS_NORM:
        raise InconsistentFactors("composed joint does not reproduce the factor model P(A, Z)")

    vars_a = [observed.var(n) for n in a_names]
    vars_y = [observed.var(n) for n in y_names]
    out = JointTable(vars_a + vars_y + list(prior_z.vars),
                     full.reshape([v.card for v in vars_a + vars_y + list(prior_z.vars)]),
                     validate=False)
    return out.transpose(observed.names + z_names)


def decompose_joint(full: JointTable, causes, outcome, latent):
    """Split P(A, Y, Z) into (P(A, Y), P(Z), c(Z, A), c(Y, Z | A)).

    UNDEFINED copula cells are kept as such; :func:`compose_joint` of the
    result reproduces ``full``.
    """
    a, y, z = _as_names(causes), _as_names(outcome), _as_names(latent)
    observed = marginalize(full, a + y)
    prior_z = marginalize(full, z)
    cz_a = copula_density(full, z, a)
    outcome_copula = copula_density(full, y, z, a)
    return observed, prior_z, cz_a, outcome_copula


def random_table(vars: Sequence[VarSpec], rng: np.random.Generator, concentration: float = 1.0) -> JointTable:
    """Dirichlet-distributed joint table; strictly positive almost surely."""
    shape = tuple(v.card for v in vars)
    size = _check_size(shape)
    probs = rng.dirichlet(np.full(size, concentration))
    return JointTable(vars, probs)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Integer-coded unit-level data, one column per variable."""

    vars: tuple[VarSpec, ...]
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] != len(self.vars):
            raise ValueError("values must be an (n, n_vars) array")
        cards = np.array([v.card for v in self.vars])
        if values.size and (values.min() < 0 or np.any(values.max(axis=0) >= cards)):
            raise ValueError("data levels out of range for declared cardinalities")
        values.setflags(write=False)
        object.__setattr__(self, "vars", tuple(self.vars))
        object.__setattr__(self, "values", values)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.vars)

    def __len__(self):
        return self.values.shape[0]

    def var(self, name: str) -> VarSpec:
        for v in self.vars:
            if v.name == name:
                return v
        raise UnknownVariable(f"{name!r} not in dataset columns {self.names}")

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(self.var(name).name)]

    def select(self, names) -> "Dataset":
        names = _as_names(names)
        return Dataset(tuple(self.var(n) for n in names), np.column_stack([self.column(n) for n in names])
                       if names else np.empty((len(self), 0), dtype=np.int64))

    def empirical_joint(self, names=None) -> JointTable:
        """Plug-in frequency table, no smoothing."""
        sub = self.select(names if names is not None else self.names)
        cards = [v.card for v in sub.vars]
        if len(sub) == 0:
            raise ValueError("empty dataset")
        flat = np.ravel_multi_index(sub.values.T, cards) if cards else np.zeros(len(sub), dtype=int)
        counts = np.bincount(flat, minlength=math.prod(cards))
        return JointTable(sub.vars, counts / counts.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.names)
            writer.writerows(self.values.tolist())

    @classmethod
    def from_csv(cls, path, cards: Mapping[str, int] | None = None) -> "Dataset":
        """Read a CSV with a header row of variable names and integer levels.

        Cardinalities not given in ``cards`` are inferred as ``max + 1``.
        """
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValueError(f"{path}: empty CSV") from None
            rows = [[int(x) for x in row] for row in reader if row]
        values = np.array(rows, dtype=np.int64).reshape(len(rows), len(header))
        cards = dict(cards or {})
        vars = []
        for j, name in enumerate(header):
            card = cards.get(name)
            if card is None:
                card = int(values[:, j].max()) + 1 if len(rows) else 1
            vars.append(VarSpec(name, card))
        return cls(tuple(vars), values)


def iter_assignments(cards: Iterable[int]):
    """All level tuples of the given cardinalities in row-major order."""
    return np.ndindex(*tuple(cards))
