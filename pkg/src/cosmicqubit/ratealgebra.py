"""Exact observation probabilities for independent exclusive-combination Poisson processes.

Within one window each exclusive combination alpha delivers Pois(lambda_alpha)
muons.  Expanding the product of Poisson pmfs up to a total count gives every
way the window can be filled; each muon is then seen by every member of its
combination independently with that member's efficiency.  An observation is
the exact set of labels that saw at least one muon.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import poisson

MAX_ORDER = 4
MAX_LABELS = 16


class OrderError(ValueError):
    pass


@dataclass(frozen=True)
class Combination:
    mask: int
    labels: tuple

    def __str__(self):
        return "".join(lab for k, lab in enumerate(self.labels) if self.mask >> k & 1) or "-"

    @classmethod
    def parse(cls, name, labels: Sequence[str]) -> "Combination":
        labels = tuple(labels)
        mask = 0
        for ch in ([] if name in ("", "-") else list(name) if isinstance(name, str) else name):
            if ch not in labels:
                raise ValueError(f"unknown label {ch!r}")
            mask |= 1 << labels.index(ch)
        return cls(mask, labels)


@dataclass
class Term:
    multiset: tuple  # ((mask, multiplicity), ...)
    observed: int  # mask of detected labels
    weight: float


@dataclass
class TermExpansion:
    labels: tuple
    order: int
    terms: list
    lambda_total: float

    def total(self) -> float:
        return float(sum(t.weight for t in self.terms))

    def tail_bound(self) -> float:
        return tail_bound(self.lambda_total, self.order)

    def table(self) -> str:
        lines = ["# multiset  observed  weight"]
        for t in self.terms:
            ms = " ".join(f"{Combination(m, self.labels)}x{n}" for m, n in t.multiset) or "-"
            lines.append(f"{ms}  {Combination(t.observed, self.labels)}  {t.weight:.6e}")
        return "\n".join(lines) + "\n"


def tail_bound(lambda_total: float, order: int) -> float:
    """P(more than ``order`` muons in the window) = 1 - sum of the expansion."""
    return float(poisson.sf(order, lambda_total))


def _normalize(lambdas: Mapping, labels: Sequence[str]) -> dict:
    if len(labels) > MAX_LABELS:
        raise ValueError(f"at most {MAX_LABELS} labels")
    out = {}
    for key, lam in lambdas.items():
        if lam < 0:
            raise ValueError("lambda must be nonnegative")
        m = key if isinstance(key, (int, np.integer)) else Combination.parse(key, labels).mask
        if m == 0:
            continue  # the empty combination deposits nothing
        if lam > 0:
            out[int(m)] = out.get(int(m), 0.0) + float(lam)
    return out


def _multisets(lam: dict, order: int):
    if not 0 <= order <= MAX_ORDER:
        raise OrderError(f"order must be in [0, {MAX_ORDER}]")
    keys = sorted(lam)
    lam_tot = sum(lam.values())
    base = math.exp(-lam_tot)
    for n in range(order + 1):
        for combo in itertools.combinations_with_replacement(keys, n):
            counts = {}
            for m in combo:
                counts[m] = counts.get(m, 0) + 1
            w = base
            for m, c in counts.items():
                w *= lam[m] ** c / math.factorial(c)
            yield tuple(sorted(counts.items())), w


def _label_hits(ms, n_labels):
    c = [0] * n_labels
    for m, n in ms:
        for k in range(n_labels):
            if m >> k & 1:
                c[k] += n
    return c


def _p_observe(hits, target: int, eff) -> float:
    p = 1.0
    for k, c in enumerate(hits):
        miss = (1.0 - eff[k]) ** c
        if target >> k & 1:
            if c == 0:
                return 0.0
            p *= 1.0 - miss
        elif c:
            p *= miss
    return p


def _eff_vector(efficiencies, labels):
    efficiencies = efficiencies or {}
    return [float(efficiencies.get(lab, 1.0)) for lab in labels]


def expand(lambdas: Mapping, labels: Sequence[str], order: int, efficiencies: Mapping | None = None) -> TermExpansion:
    """All multisets with total count <= order, split into detection outcomes.

    Without efficiencies every outcome is the union of the hit combinations.
    """
    labels = tuple(labels)
    lam = _normalize(lambdas, labels)
    eff = _eff_vector(efficiencies, labels)
    terms = []
    for ms, w in _multisets(lam, order):
        union = 0
        for m, _ in ms:
            union |= m
        if efficiencies is None:
            terms.append(Term(ms, union, w))
            continue
        hits = _label_hits(ms, len(labels))
        members = [k for k in range(len(labels)) if union >> k & 1]
        for r in range(len(members) + 1):
            for sub in itertools.combinations(members, r):
                s = sum(1 << k for k in sub)
                p = _p_observe(hits, s, eff)
                if p > 0:
                    terms.append(Term(ms, s, w * p))
    return TermExpansion(labels, order, terms, sum(lam.values()))


def observation_probability(target, lambdas: Mapping, labels: Sequence[str], efficiencies: Mapping | None = None,
                            order: int = 1) -> float:
    """Probability that exactly the labels in ``target`` register, to the given order."""
    labels = tuple(labels)
    t = target if isinstance(target, (int, np.integer)) else Combination.parse(target, labels).mask
    lam = _normalize(lambdas, labels)
    eff = _eff_vector(efficiencies, labels)
    total = 0.0
    for ms, w in _multisets(lam, order):
        total += w * _p_observe(_label_hits(ms, len(labels)), int(t), eff)
    return total


def first_order_rate(target, lambdas: Mapping, labels: Sequence[str], efficiencies: Mapping | None = None) -> float:
    """Leading term: one muon in some alpha containing the target, seen by exactly the target."""
    labels = tuple(labels)
    t = target if isinstance(target, (int, np.integer)) else Combination.parse(target, labels).mask
    lam = _normalize(lambdas, labels)
    eff = _eff_vector(efficiencies, labels)
    out = 0.0
    for m, v in lam.items():
        if m & t == t:
            out += v * _p_observe(_label_hits(((m, 1),), len(labels)), int(t), eff)
    return out


@dataclass
class GapRow:
    combination: str
    first_order: float
    exact: float
    absolute_gap: float
    relative_gap: float


def first_order_check(lambdas: Mapping, labels: Sequence[str], efficiencies: Mapping | None = None,
                      order: int = 3, targets: Sequence | None = None) -> list:
    """Compare the leading-term probability with the expansion to ``order`` for each target."""
    labels = tuple(labels)
    lam = _normalize(lambdas, labels)
    eff = _eff_vector(efficiencies, labels)
    if targets is None:
        masks = sorted({m for m in range(1, 1 << len(labels))
                        if any(k & m == m for k in lam)})
    else:
        masks = [t if isinstance(t, int) else Combination.parse(t, labels).mask for t in targets]
    exact = dict.fromkeys(masks, 0.0)
    for ms, w in _multisets(lam, order):
        hits = _label_hits(ms, len(labels))
        for t in masks:
            p = _p_observe(hits, t, eff)
            if p:
                exact[t] += w * p
    rows = []
    for t in masks:
        fo = first_order_rate(t, lam, labels, efficiencies)
        ex = exact[t]
        gap = abs(ex - fo)
        rows.append(GapRow(str(Combination(t, labels)), fo, ex, gap, gap / ex if ex > 0 else 0.0))
    return rows


def simulate_observations(lambdas: Mapping, labels: Sequence[str], efficiencies: Mapping | None,
                          n_trials: int, rng: np.random.Generator) -> np.ndarray:
    """Monte Carlo: counts of each observed mask over independent windows."""
    labels = tuple(labels)
    lam = _normalize(lambdas, labels)
    eff = np.array(_eff_vector(efficiencies, labels))
    hits = np.zeros((n_trials, len(labels)), np.int64)
    for m, v in lam.items():
        n = rng.poisson(v, n_trials)
        for k in range(len(labels)):
            if m >> k & 1:
                hits[:, k] += n
    seen = rng.random(hits.shape) < 1.0 - (1.0 - eff) ** hits
    obs = (seen * (1 << np.arange(len(labels)))).sum(axis=1)
    return np.bincount(obs, minlength=1 << len(labels))
