"""Discrete structural models on the multi-cause DAG.

The DAG has a latent confounder Z with edges Z -> A_k for every cause,
Z -> X (optional covariate), Z -> Y and A -> Y. Causes have no edges among
themselves, so they are mutually independent given Z by construction.
Potential outcomes are read straight off the structural tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import NoConfounding
from .tables import (
    EPS_NORM,
    Dataset,
    JointTable,
    VarSpec,
    compose_joint,
    conditional_array,
    decompose_joint,
    marginalize,
    total_variation,
    CopulaGrid,
)

SAMPLE_BLOCK = 1024


def _check_rows(name, arr, width):
    arr = np.asarray(arr, dtype=float)
    if arr.shape[-1] != width:
        raise ValueError(f"{name}: last axis has {arr.shape[-1]} levels, expected {width}")
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=-1) - 1) > EPS_NORM):
        raise ValueError(f"{name}: every row must be a probability distribution")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScmSpec:
    """Generative model P(z) prod_k P(a_k | z) P(x | z) P(y | a, z).

    ``p_y_given_az`` has shape ``(card_1, ..., card_m, |Z|, |Y|)``.
    ``unidentified`` lists (a, z) rows of the outcome table that could not be
    read back from a joint (zero mass) and were filled by convention.
    """

    z: VarSpec
    causes: tuple[VarSpec, ...]
    y: VarSpec
    p_z: np.ndarray
    p_a_given_z: tuple[np.ndarray, ...]
    p_y_given_az: np.ndarray
    x: VarSpec | None = None
    p_x_given_z: np.ndarray | None = None
    unidentified: tuple = field(default=())

    def __post_init__(self):
        causes = tuple(self.causes)
        if len(causes) < 2:
            raise ValueError("a multi-cause model needs at least two causes")
        names = [self.z.name, self.y.name] + [c.name for c in causes] + ([self.x.name] if self.x else [])
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names: {names}")
        object.__setattr__(self, "causes", causes)
        object.__setattr__(self, "p_z", _check_rows("p_z", self.p_z, self.z.card))
        if len(self.p_a_given_z) != len(causes):
            raise ValueError("need one conditional table per cause")
        tabs = tuple(_check_rows(f"p_a_given_z[{k}]", t, c.card) for k, (t, c) in enumerate(zip(self.p_a_given_z, causes)))
        for k, t in enumerate(tabs):
            if t.shape != (self.z.card, causes[k].card):
                raise ValueError(f"p_a_given_z[{k}] must have shape (|Z|, |A_{k}|)")
        object.__setattr__(self, "p_a_given_z", tabs)
        py = _check_rows("p_y_given_az", self.p_y_given_az, self.y.card)
        if py.shape != self.cause_cards + (self.z.card, self.y.card):
            raise ValueError(f"p_y_given_az must have shape {self.cause_cards + (self.z.card, self.y.card)}")
        object.__setattr__(self, "p_y_given_az", py)
        if (self.x is None) != (self.p_x_given_z is None):
            raise ValueError("x and p_x_given_z must be given together")
        if self.x is not None:
            px = _check_rows("p_x_given_z", self.p_x_given_z, self.x.card)
            if px.shape != (self.z.card, self.x.card):
                raise ValueError("p_x_given_z must have shape (|Z|, |X|)")
            object.__setattr__(self, "p_x_given_z", px)
        object.__setattr__(self, "unidentified", tuple(tuple(map(int, u)) for u in self.unidentified))

    @property
    def m(self) -> int:
        return len(self.causes)

    @property
    def cause_cards(self) -> tuple[int, ...]:
        return tuple(c.card for c in self.causes)

    @property
    def cause_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.causes)

    def p_a_given_z_joint(self) -> np.ndarray:
        """P(A = a | Z = z) as an array of shape ``cause_cards + (|Z|,)``."""
        out = np.ones((self.z.card,))
        for t in reversed(self.p_a_given_z):
            out = _outer_front(t.T, out)
        return out

    def to_dict(self):
        d = {
            "z": self.z.to_dict(),
            "causes": [c.to_dict() for c in self.causes],
            "y": self.y.to_dict(),
            "p_z": self.p_z.tolist(),
            "p_a_given_z": [t.tolist() for t in self.p_a_given_z],
            "p_y_given_az": self.p_y_given_az.ravel().tolist(),
        }
        if self.x is not None:
            d["x"] = self.x.to_dict()
            d["p_x_given_z"] = self.p_x_given_z.tolist()
        if self.unidentified:
            d["unidentified"] = [list(u) for u in self.unidentified]
        return d

    @classmethod
    def from_dict(cls, d) -> "ScmSpec":
        z = VarSpec(d["z"]["name"], d["z"]["card"])
        causes = tuple(VarSpec(c["name"], c["card"]) for c in d["causes"])
        y = VarSpec(d["y"]["name"], d["y"]["card"])
        py = np.asarray(d["p_y_given_az"], dtype=float).reshape(tuple(c.card for c in causes) + (z.card, y.card))
        x = VarSpec(d["x"]["name"], d["x"]["card"]) if d.get("x") else None
        return cls(
            z=z,
            causes=causes,
            y=y,
            p_z=d["p_z"],
            p_a_given_z=tuple(np.asarray(t, dtype=float) for t in d["p_a_given_z"]),
            p_y_given_az=py,
            x=x,
            p_x_given_z=np.asarray(d["p_x_given_z"], dtype=float) if x else None,
            unidentified=tuple(tuple(u) for u in d.get("unidentified", ())),
        )


def _outer_front(t_kz, rest):
    # t_kz: (card_k, Z); rest: (..., Z) -> (card_k, ..., Z)
    return t_kz.reshape(t_kz.shape[:1] + (1,) * (rest.ndim - 1) + t_kz.shape[1:]) * rest[None]


@dataclass(frozen=True)
class PotentialOutcomeDist:
    """Distribution of Y(a) for a cause assignment ``a``."""

    a: tuple
    dist: np.ndarray

    def __post_init__(self):
        dist = np.asarray(self.dist, dtype=float)
        if abs(dist.sum() - 1) > EPS_NORM:
            raise ValueError("potential-outcome distribution must sum to 1")
        object.__setattr__(self, "dist", dist)

    def to_dict(self):
        return {"a": list(self.a), "dist": self.dist.tolist()}


def _levels(scm: ScmSpec, a) -> tuple[int, ...]:
    if isinstance(a, Mapping):
        a = tuple(a[c.name] for c in scm.causes)
    a = tuple(int(v) for v in a)
    if len(a) != scm.m or any(not 0 <= v < c.card for v, c in zip(a, scm.causes)):
        raise ValueError(f"invalid cause assignment {a}")
    return a


def full_joint(scm: ScmSpec) -> JointTable:
    """Structural joint over (A_1..A_m, [X], Y, Z), built by enumeration."""
    p_az = scm.p_a_given_z_joint() * scm.p_z  # cause_cards + (Z,)
    p_ayz = p_az[..., None, :] * np.moveaxis(scm.p_y_given_az, -1, -2)  # + (Y, Z)
    vars = list(scm.causes)
    if scm.x is not None:
        # insert X between causes and Y: (..., X, Y, Z)
        p_ayz = p_ayz[..., None, :, :] * scm.p_x_given_z.T[:, None, :]
        vars.append(scm.x)
    vars += [scm.y, scm.z]
    return JointTable(vars, p_ayz)


def observed_joint(scm: ScmSpec) -> JointTable:
    """Marginal of the structural joint with Z summed out."""
    full = full_joint(scm)
    return marginalize(full, [n for n in full.names if n != scm.z.name])


def ground_truth_po(scm: ScmSpec, a) -> PotentialOutcomeDist:
    """P(Y(a)) = sum_z P(z) P(Y | a, z) from the structural tables."""
    a = _levels(scm, a)
    dist = scm.p_z @ scm.p_y_given_az[a]
    return PotentialOutcomeDist(a, dist)


def ground_truth_po_focal(scm: ScmSpec, a_focal: Mapping[str, int]) -> np.ndarray:
    """P(Y(a_focal)) intervening on the focal causes only.

    Auxiliary causes and Z keep their natural joint law.
    """
    names = scm.cause_names
    for n in a_focal:
        if n not in names:
            raise ValueError(f"{n!r} is not a cause")
    p_az = scm.p_a_given_z_joint() * scm.p_z
    focal_axes = [names.index(n) for n in a_focal]
    # law of (aux, Z): sum out focal causes
    p_aux_z = p_az.sum(axis=tuple(focal_axes), keepdims=True)
    index = tuple(a_focal[n] if n in a_focal else slice(None) for n in names)
    py = scm.p_y_given_az[index]  # aux dims + (Z, Y)
    weights = np.squeeze(p_aux_z, axis=tuple(focal_axes))
    return np.tensordot(weights, py, axes=weights.ndim)


def counterfactual_po(scm: ScmSpec, a_prime, given_a) -> np.ndarray:
    """P(Y(a') | A = a) = sum_z P(z | A = a) P(Y | a', z)."""
    a_prime, given_a = _levels(scm, a_prime), _levels(scm, given_a)
    w = scm.p_a_given_z_joint()[given_a] * scm.p_z
    if w.sum() <= 0:
        raise ValueError(f"P(A = {given_a}) = 0")
    return (w / w.sum()) @ scm.p_y_given_az[a_prime]


@dataclass(frozen=True, eq=False)
class Sample:
    """Observed data plus the latent column, kept apart on purpose."""

    data: Dataset
    hidden_z: np.ndarray


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _unit_uniforms(seed: int, n: int, width: int) -> np.ndarray:
    # counter-based: block b is a pure function of (seed, b)
    blocks = []
    for b in range(math.ceil(n / SAMPLE_BLOCK)):
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2**64 - 1), b])))
        blocks.append(gen.random((SAMPLE_BLOCK, width)))
    return np.concatenate(blocks)[:n] if blocks else np.empty((0, width))


def sample(scm: ScmSpec, n: int, seed: int) -> Sample:
    """Draw ``n`` i.i.d. ancestral samples.

    Unit ``i`` depends only on ``(seed, i)``, so samples of different sizes
    share their common prefix and blocks can be generated independently.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    u = _unit_uniforms(seed, n, scm.m + 3)
    z = _inverse_cdf(np.broadcast_to(scm.p_z, (n, scm.z.card)), u[:, 0])
    cols, vars = [], []
    for k, (c, t) in enumerate(zip(scm.causes, scm.p_a_given_z)):
        cols.append(_inverse_cdf(t[z], u[:, 1 + k]))
        vars.append(c)
    a = np.column_stack(cols)
    if scm.x is not None:
        cols.append(_inverse_cdf(scm.p_x_given_z[z], u[:, scm.m + 1]))
        vars.append(scm.x)
    rows = scm.p_y_given_az[tuple(a.T) + (z,)]
    cols.append(_inverse_cdf(rows, u[:, scm.m + 2]))
    vars.append(scm.y)
    return Sample(Dataset(tuple(vars), np.column_stack(cols)), z)


def random_scm(
    rng: np.random.Generator,
    n_z: int = 2,
    cause_cards: Sequence[int] = (2, 2, 2),
    n_y: int = 2,
    n_x: int | None = None,
    concentration: float = 1.0,
) -> ScmSpec:
    """Random model with every conditional row drawn from Dirichlet(concentration)."""
    def rows(*shape):
        return rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])

    causes = tuple(VarSpec(f"A{k + 1}", c) for k, c in enumerate(cause_cards))
    x = VarSpec("X", n_x) if n_x else None
    return ScmSpec(
        z=VarSpec("Z", n_z),
        causes=causes,
        y=VarSpec("Y", n_y),
        p_z=rng.dirichlet(np.full(n_z, concentration)),
        p_a_given_z=tuple(rows(n_z, c) for c in cause_cards),
        p_y_given_az=rows(*cause_cards, n_z, n_y),
        x=x,
        p_x_given_z=rows(n_z, n_x) if n_x else None,
    )


def default_template() -> ScmSpec:
    """Three binary causes driven by a binary confounder that also moves Y."""
    causes = tuple(VarSpec(f"A{k + 1}", 2) for k in range(3))
    p_a = np.array([[0.8, 0.2], [0.25, 0.75]])
    p_y = np.empty((2, 2, 2, 2, 2))
    for a in np.ndindex(2, 2, 2):
        for z in range(2):
            p1 = 0.15 + 0.1 * sum(a) / 3 + 0.55 * z
            p_y[a + (z,)] = [1 - p1, p1]
    return ScmSpec(
        z=VarSpec("Z", 2),
        causes=causes,
        y=VarSpec("Y", 2),
        p_z=[0.5, 0.5],
        p_a_given_z=(p_a, p_a.copy(), p_a.copy()),
        p_y_given_az=p_y,
    )


def structural_tables_from_joint(joint: JointTable, like: ScmSpec) -> ScmSpec:
    """Read structural tables back from a joint over (A, Y, Z) by conditioning.

    Outcome rows for (a, z) with zero mass are unidentified. They are filled
    with P(Y | A = a) when P(a) > 0 (the independence-copula extension) and
    uniform otherwise, and listed in ``unidentified``.
    """
    a_names, y, z = like.cause_names, like.y.name, like.z.name
    p_z = marginalize(joint, [z]).probs
    p_a = []
    for c in a_names:
        cond, ok = conditional_array(joint, [c], [z])
        p_a.append(np.where(ok[:, None], cond, 1.0 / joint.var(c).card))
    p_y, ok = conditional_array(joint, [y], list(a_names) + [z])
    p_y_a, ok_a = conditional_array(joint, [y], list(a_names))
    flagged = []
    for idx in np.ndindex(*ok.shape):
        if not ok[idx]:
            flagged.append(idx)
            a_idx = idx[:-1]
            p_y[idx] = p_y_a[a_idx] if ok_a[a_idx] else 1.0 / like.y.card
    return ScmSpec(
        z=like.z, causes=like.causes, y=like.y, p_z=p_z, p_a_given_z=tuple(p_a), p_y_given_az=p_y,
        x=like.x, p_x_given_z=like.p_x_given_z, unidentified=tuple(flagged),
    )


def make_confounded_pair(template: ScmSpec, a_star, tol: float = 1e-12):
    """Two models with the same observables and different causal truths.

    The second model keeps the observed P(A, Y) and the factor model
    P(Z) c(Z, A) of ``template`` but swaps its outcome copula c(Y, Z | A)
    for the independence copula.

    Returns
    -------
    (ScmSpec, ScmSpec, float)
        The template, the recomposed model, and the total-variation gap
        between their P(Y(a_star)).

    Raises
    ------
    NoConfounding
        If P(Y(a_star)) already equals P(Y | A = a_star) in the template.
    """
    a_star = _levels(template, a_star)
    truth = ground_truth_po(template, a_star).dist
    full = marginalize(full_joint(template), template.cause_names + (template.y.name, template.z.name))
    naive = conditional_array(full, [template.y.name], template.cause_names)[0][a_star]
    if np.any(np.isnan(naive)):
        raise NoConfounding(f"P(A = {a_star}) = 0, no observable conditional to compare against")
    if total_variation(truth, naive) <= tol:
        raise NoConfounding(f"P(Y(a*)) equals P(Y | A = a*) at a* = {a_star}")
    observed, prior_z, cz_a, oc = decompose_joint(full, template.cause_names, template.y.name, template.z.name)
    indep = CopulaGrid.independence(oc.vars_v, oc.vars_w, oc.cond_vars)
    recomposed = compose_joint(observed, prior_z, cz_a, indep)
    other = structural_tables_from_joint(recomposed, template)
    gap = total_variation(truth, ground_truth_po(other, a_star).dist)
    return template, other, gap
