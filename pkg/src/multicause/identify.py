"""Identification formulas for potential-outcome distributions.

``adjust`` needs the confounder itself. ``thm7_estimand`` and
``thm8_estimand`` use observables only and are valid when the confounder is
a deterministic function of (a subset of) the causes. Queries that are not
identified raise typed errors; bounds for them live in
:mod:`multicause.sensitivity`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import OverlapViolation, ZeroProbabilityEvidence, ZhatMismatch
from .scm import PotentialOutcomeDist
from .tables import JointTable, _as_names, marginalize


@dataclass(frozen=True)
class FocalPartition:
    """Causes whose effect is estimated (focal) and those used as proxies (auxiliary)."""

    focal: tuple[str, ...]
    auxiliary: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "focal", _as_names(self.focal))
        object.__setattr__(self, "auxiliary", _as_names(self.auxiliary))
        if not self.focal:
            raise ValueError("focal set must be non-empty")
        if set(self.focal) & set(self.auxiliary):
            raise ValueError("focal and auxiliary causes must be disjoint")

    def check_covers(self, causes: Sequence[str]):
        if sorted(self.focal + self.auxiliary) != sorted(causes):
            raise ValueError(f"partition {self.focal} | {self.auxiliary} does not cover causes {tuple(causes)}")


@dataclass
class OverlapReport:
    """Strata (with positive mass) and the focal values missing in each."""

    strata: list = field(default_factory=list)

    @property
    def satisfied(self) -> bool:
        return all(not missing for _, missing in self.strata)

    def violations(self):
        return [(s, missing) for s, missing in self.strata if missing]

    def to_dict(self):
        return {
            "satisfied": self.satisfied,
            "strata": [{"stratum": list(s), "missing": [list(m) for m in missing]} for s, missing in self.strata],
        }


def _po(a, dist):
    return PotentialOutcomeDist(tuple(a), dist)


def _stratified(table: JointTable, focal, strata, outcome):
    """Array P(strata, focal, outcome) with one flattened axis per group."""
    return table.grouped(_as_names(strata), _as_names(focal), _as_names(outcome))


def overlap_check(table: JointTable, focal, strata=(), zhat_fn: Callable | None = None) -> OverlapReport:
    """Enumerate strata and focal values with zero joint mass.

    Two modes:

    * ``strata`` variables (auxiliary causes, or Z in a full joint): for each
      stratum u with P(u) > 0, list focal values f with P(f, u) = 0.
    * ``zhat_fn`` over the focal causes: strata are the zhat levels and a
      focal value is missing when it maps into a stratum yet has P(f) = 0.

    Never raises.
    """
    focal = _as_names(focal)
    f_cards = table.cards(focal)
    f_levels = list(np.ndindex(*f_cards))
    report = OverlapReport()
    if zhat_fn is not None:
        p_f = marginalize(table, focal).probs.ravel()
        groups: dict = {}
        for i, f in enumerate(f_levels):
            groups.setdefault(zhat_fn(f), []).append(i)
        for s, members in groups.items():
            if p_f[members].sum() <= 0:
                continue
            missing = [f_levels[i] for i in members if p_f[i] <= 0]
            report.strata.append(((s,), missing))
        return report
    strata = _as_names(strata)
    s_levels = list(np.ndindex(*table.cards(strata)))
    arr = table.grouped(strata, focal)
    p_s = arr.sum(axis=1)
    for i, u in enumerate(s_levels):
        if p_s[i] <= 0:
            continue
        missing = [f_levels[j] for j in np.flatnonzero(arr[i] <= 0)]
        report.strata.append((u, missing))
    return report


def _levels_of(a, names):
    if isinstance(a, Mapping):
        return tuple(int(a[n]) for n in names)
    return tuple(int(v) for v in a)


def adjust(full_joint: JointTable, a: Mapping[str, int], outcome: str = "Y", latent="Z") -> PotentialOutcomeDist:
    """sum_z P(z) P(Y | A = a, Z = z) from a joint that includes Z.

    Variables other than the causes in ``a``, the outcome and Z are summed out.

    Raises
    ------
    OverlapViolation
        If P(A = a, Z = z) = 0 for some z with P(z) > 0.
    """
    names = tuple(a)
    a_lv = _levels_of(a, names)
    arr = _stratified(full_joint, names, latent, outcome)  # (Z, A, Y)
    a_idx = np.ravel_multi_index(a_lv, full_joint.cards(names)) if names else 0
    p_z = arr.sum(axis=(1, 2))
    p_az = arr[:, a_idx, :]
    mass = p_az.sum(axis=1)
    bad = np.flatnonzero((p_z > 0) & (mass <= 0))
    if bad.size:
        z_levels = list(np.ndindex(*full_joint.cards(latent)))
        raise OverlapViolation(f"P(A = {a_lv}, Z = z) = 0 for z in {[z_levels[i] for i in bad]}",
                               [z_levels[i] for i in bad])
    ok = p_z > 0
    dist = (p_z[ok, None] * p_az[ok] / mass[ok, None]).sum(axis=0)
    return _po(a_lv, dist)


def thm7_estimand(observed: JointTable, partition: FocalPartition, a_focal, outcome: str = "Y") -> PotentialOutcomeDist:
    """sum_u P(A_aux = u) P(Y | A_focal = a_focal, A_aux = u).

    Identifies P(Y(a_focal)) when the confounder is a function of the
    auxiliary causes and every auxiliary stratum contains ``a_focal``.

    Raises
    ------
    OverlapViolation
        Lists auxiliary strata u with P(u) > 0 but P(a_focal, u) = 0.
    """
    causes = [n for n in observed.names if n != outcome]
    unused = [n for n in causes if n not in partition.focal + partition.auxiliary]
    if unused:
        raise ValueError(f"causes {unused} are in neither the focal nor the auxiliary set")
    a_lv = _levels_of(a_focal, partition.focal)
    arr = _stratified(observed, partition.focal, partition.auxiliary, outcome)  # (U, F, Y)
    f_idx = np.ravel_multi_index(a_lv, observed.cards(partition.focal))
    p_u = arr.sum(axis=(1, 2))
    p_fu = arr[:, f_idx, :]
    mass = p_fu.sum(axis=1)
    bad = np.flatnonzero((p_u > 0) & (mass <= 0))
    if bad.size:
        u_levels = list(np.ndindex(*observed.cards(partition.auxiliary)))
        raise OverlapViolation(f"P(focal = {a_lv}, aux = u) = 0 for u in {[u_levels[i] for i in bad]}",
                               [u_levels[i] for i in bad])
    ok = p_u > 0
    dist = (p_u[ok, None] * p_fu[ok] / mass[ok, None]).sum(axis=0)
    return _po(a_lv, dist)


def thm8_estimand(observed: JointTable, a, a_prime, zhat_fn: Callable, outcome: str = "Y",
                  causes: Sequence[str] | None = None) -> np.ndarray:
    """P(Y(a') | A = a) = P(Y | A = a') for a, a' in the same zhat level.

    Raises
    ------
    ZhatMismatch
        If zhat(a) != zhat(a'); the counterfactual is then not identified.
    ZeroProbabilityEvidence
        If P(A = a') = 0.
    """
    causes = tuple(causes) if causes is not None else tuple(n for n in observed.names if n != outcome)
    a, a_prime = _levels_of(a, causes), _levels_of(a_prime, causes)
    if zhat_fn(a) != zhat_fn(a_prime):
        raise ZhatMismatch(f"zhat({a}) = {zhat_fn(a)!r} differs from zhat({a_prime}) = {zhat_fn(a_prime)!r}")
    arr = observed.grouped(causes, [outcome])
    row = arr[np.ravel_multi_index(a_prime, observed.cards(causes))]
    if row.sum() <= 0:
        raise ZeroProbabilityEvidence(f"P(A = {a_prime}) = 0")
    return row / row.sum()


def estimand_to_dict(estimand: str, inputs: dict, distribution, overlap: OverlapReport | None = None) -> dict:
    """JSON payload for an identification result."""
    dist = distribution.dist if isinstance(distribution, PotentialOutcomeDist) else np.asarray(distribution)
    return {
        "estimand": estimand,
        "inputs": inputs,
        "distribution": [float(v) for v in dist],
        "overlap_report": overlap.to_dict() if overlap is not None else None,
    }


def thm7_gap(observed: JointTable, partition: FocalPartition, a_focal, truth, outcome: str = "Y") -> float:
    """Total-variation distance between the observable estimand and a structural truth."""
    est = thm7_estimand(observed, partition, a_focal, outcome).dist
    return 0.5 * float(np.abs(est - np.asarray(truth)).sum())
