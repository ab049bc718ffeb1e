"""Straight-line transport through axis-aligned prisms and cross-section bookkeeping.

Muons are treated as minimum-ionizing: the energy left in a volume is
dE/dx times the chord length.  Cross-sections are counted per combination of
labels as bitmasks, so inclusive and exclusive sets are related by an exact
integer superset-sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .fluxmc import ConfigError, MuonBatch, MuonSample

MAX_LABELS = 16


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class Prism:
    label: str
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        if np.any(np.asarray(self.half_extents, dtype=float) <= 0):
            raise ConfigError(f"prism {self.label}: half extents must be positive")

    @classmethod
    def from_dims(cls, label, dims, center):
        return cls(label, tuple(float(c) for c in center), tuple(0.5 * float(d) for d in dims))

    @property
    def lo(self):
        return np.asarray(self.center, dtype=float) - np.asarray(self.half_extents, dtype=float)

    @property
    def hi(self):
        return np.asarray(self.center, dtype=float) + np.asarray(self.half_extents, dtype=float)

    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


@dataclass(frozen=True)
class DepositionModel:
    de_dx: float = 2.0  # MeV/cm, plastic scintillator
    fractional_smear: float = 0.0
    secondary_boost: float = 1.0
    de_dx_by_label: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.de_dx <= 0 or any(v <= 0 for v in self.de_dx_by_label.values()):
            raise ConfigError("de_dx must be positive")
        if not 0 <= self.fractional_smear < 1:
            raise ConfigError("fractional_smear must be in [0, 1)")
        if self.secondary_boost < 1:
            raise ConfigError("secondary_boost must be >= 1")

    def loss(self, label: str) -> float:
        return float(self.de_dx_by_label.get(label, self.de_dx))


@dataclass(frozen=True)
class Scene:
    prisms: tuple
    deposition_model: DepositionModel = DepositionModel()

    def __post_init__(self):
        labels = [p.label for p in self.prisms]
        if len(set(labels)) != len(labels):
            raise ConfigError("duplicate prism labels")
        if len(labels) > MAX_LABELS:
            raise ConfigError(f"at most {MAX_LABELS} volumes")

    @property
    def labels(self) -> tuple:
        return tuple(p.label for p in self.prisms)

    def corners(self, labels=None) -> np.ndarray:
        sel = [p for p in self.prisms if labels is None or p.label in labels]
        if not sel:
            return np.zeros((0, 3))
        return np.concatenate([p.corners() for p in sel])


def _chords(origin: np.ndarray, direction: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab method, vectorized over rays.  Only the forward half-line counts."""
    origin = np.atleast_2d(origin)
    direction = np.atleast_2d(direction)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / direction
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tnear = np.minimum(t1, t2)
    tfar = np.maximum(t1, t2)
    # rays parallel to a slab: inside -> unbounded, outside -> empty
    par = direction == 0
    if par.any():
        inside = (origin >= lo) & (origin <= hi)
        tnear = np.where(par, np.where(inside, -np.inf, np.inf), tnear)
        tfar = np.where(par, np.where(inside, np.inf, -np.inf), tfar)
    t0 = np.maximum(tnear.max(axis=1), 0.0)
    t1 = tfar.min(axis=1)
    return np.maximum(t1 - t0, 0.0)


def ray_path_length(origin, direction, prism: Prism) -> float:
    return float(_chords(np.asarray(origin, float), np.asarray(direction, float), prism.lo, prism.hi)[0])


def deposit(muon: MuonSample, scene: Scene, rng: np.random.Generator | None = None) -> dict:
    out = {}
    smear = scene.deposition_model.fractional_smear
    for p in scene.prisms:
        length = ray_path_length(muon.origin, muon.direction, p)
        if length > 0:
            e = scene.deposition_model.loss(p.label) * length
            if smear > 0:
                e *= 1.0 + smear * rng.standard_normal()
            if e > 0:
                out[p.label] = e
    return out


@dataclass
class DepositionTable:
    """Sparse columnar table: one entry per (muon, label) with a deposit."""

    labels: tuple
    muon_index: np.ndarray  # int64
    label_index: np.ndarray  # int16, into labels
    energy: np.ndarray  # MeV
    total_thrown: int
    tangent_area: float
    secondary_boost: float = 1.0

    def __post_init__(self):
        if np.any(self.energy <= 0):
            raise ValueError("deposition energies must be positive")

    @property
    def n_rows(self) -> int:
        return len(np.unique(self.muon_index))

    def dense(self):
        """(row muon indices, energy matrix [rows, labels]) with 0 meaning no deposit."""
        rows, inv = np.unique(self.muon_index, return_inverse=True)
        mat = np.zeros((len(rows), len(self.labels)))
        mat[inv, self.label_index] = self.energy
        return rows, mat

    @classmethod
    def from_dense(cls, labels, rows, mat, total_thrown, tangent_area, secondary_boost=1.0):
        r, c = np.nonzero(mat > 0)
        return cls(tuple(labels), np.asarray(rows, np.int64)[r], c.astype(np.int16), mat[r, c],
                   int(total_thrown), float(tangent_area), secondary_boost)

    def with_energies(self, energy: np.ndarray) -> "DepositionTable":
        """Same entries with replaced energies; nonpositive values are removed."""
        keep = energy > 0
        return replace(self, muon_index=self.muon_index[keep], label_index=self.label_index[keep],
                       energy=energy[keep])


def run_transport(batch: MuonBatch, scene: Scene, rng: np.random.Generator | None = None,
                  relevant: Sequence[str] | None = None, total_thrown: int | None = None) -> DepositionTable:
    """Transport a batch through the scene.

    ``relevant`` restricts the side-length rule to the volumes the table will be
    used for (a chip-focused square cannot enclose the detectors' shadow).
    """
    labels = scene.labels
    if labels:
        d = np.max(np.linalg.norm(scene.corners(relevant) - batch.center, axis=1)) if len(scene.corners(relevant)) else 0.0
        if not batch.tangent_side_l > 2.0 * d:
            raise ConfigError(f"tangent side {batch.tangent_side_l} cm must exceed 2d = {2 * d:.3f} cm")
    smear = scene.deposition_model.fractional_smear
    mi, li, en = [], [], []
    for k, p in enumerate(scene.prisms):
        chord = _chords(batch.origin, batch.direction, p.lo, p.hi)
        hit = np.nonzero(chord > 0)[0]
        e = scene.deposition_model.loss(p.label) * chord[hit]
        if smear > 0:
            e = e * (1.0 + smear * rng.standard_normal(len(hit)))
        ok = e > 0
        mi.append(hit[ok] + batch.first_index)
        li.append(np.full(ok.sum(), k, np.int16))
        en.append(e[ok])
    if mi:
        mi, li, en = np.concatenate(mi).astype(np.int64), np.concatenate(li), np.concatenate(en)
        order = np.lexsort((li, mi))
        mi, li, en = mi[order], li[order], en[order]
    else:
        mi, li, en = np.zeros(0, np.int64), np.zeros(0, np.int16), np.zeros(0)
    n = len(batch) if total_thrown is None else total_thrown
    return DepositionTable(labels, mi, li, en, n, batch.tangent_area, scene.deposition_model.secondary_boost)


def merge_tables(tables: Sequence[DepositionTable]) -> DepositionTable:
    """Concatenate tables transported from disjoint index ranges of one sample."""
    t0 = tables[0]
    for t in tables[1:]:
        if t.labels != t0.labels or t.tangent_area != t0.tangent_area:
            raise ValueError("tables from different scenes or samplers")
    mi = np.concatenate([t.muon_index for t in tables])
    li = np.concatenate([t.label_index for t in tables])
    en = np.concatenate([t.energy for t in tables])
    order = np.lexsort((li, mi))
    return DepositionTable(t0.labels, mi[order], li[order], en[order],
                           sum(t.total_thrown for t in tables), t0.tangent_area, t0.secondary_boost)


# --- combinations ---------------------------------------------------------


def combo_name(mask: int, labels: Sequence[str]) -> str:
    parts = [lab for k, lab in enumerate(labels) if mask >> k & 1]
    sep = "" if all(len(lab) == 1 for lab in labels) else "+"
    return sep.join(parts)


def combo_mask(name, labels: Sequence[str]) -> int:
    if isinstance(name, (set, frozenset, tuple, list)):
        parts = list(name)
    elif "+" in name:
        parts = name.split("+")
    elif all(len(lab) == 1 for lab in labels):
        parts = list(name)
    else:
        parts = [name] if name else []
    mask = 0
    for p in parts:
        if p not in labels:
            raise ConfigError(f"unknown label {p!r}")
        mask |= 1 << labels.index(p)
    return mask


def superset_sum(f: np.ndarray, n_bits: int) -> np.ndarray:
    """g[m] = sum of f[m'] over all m' that contain m."""
    g = np.array(f, copy=True)
    idx = np.arange(len(g))
    for b in range(n_bits):
        without = idx[(idx >> b & 1) == 0]
        g[without] += g[without | (1 << b)]
    return g


def subset_mobius(g: np.ndarray, n_bits: int) -> np.ndarray:
    """Inverse of superset_sum."""
    f = np.array(g, copy=True)
    idx = np.arange(len(f))
    for b in range(n_bits):
        without = idx[(idx >> b & 1) == 0]
        f[without] -= f[without | (1 << b)]
    return f


@dataclass
class CrossSectionSet:
    labels: tuple
    exclusive_counts: np.ndarray  # int64 over all 2^L masks, empty mask included
    tangent_area: float
    sample_count: int
    secondary_boost: float = 1.0

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    @property
    def inclusive_counts(self) -> np.ndarray:
        return superset_sum(self.exclusive_counts, self.n_labels)

    def exclusive_array(self) -> np.ndarray:
        """sigma* per mask in cm^2.  The boost scales every non-empty combination;
        the empty combination takes the remainder so the partition still sums to l^2."""
        if self.sample_count == 0:
            return np.zeros(len(self.exclusive_counts))
        s = self.exclusive_counts * (self.tangent_area / self.sample_count)
        s[1:] *= self.secondary_boost
        s[0] = self.tangent_area - s[1:].sum()
        return s

    def inclusive_array(self) -> np.ndarray:
        return superset_sum(self.exclusive_array(), self.n_labels)

    @property
    def exclusive(self) -> dict:
        s = self.exclusive_array()
        return {combo_name(m, self.labels): float(s[m]) for m in range(len(s))}

    @property
    def inclusive(self) -> dict:
        s = self.inclusive_array()
        return {combo_name(m, self.labels): float(s[m]) for m in range(len(s))}

    def sigma(self, combo) -> float:
        return float(self.inclusive_array()[combo_mask(combo, self.labels)])

    def sigma_star(self, combo) -> float:
        return float(self.exclusive_array()[combo_mask(combo, self.labels)])

    def marginalize(self, keep: Sequence[str]) -> "CrossSectionSet":
        keep = [lab for lab in self.labels if lab in keep]
        idx = [self.labels.index(lab) for lab in keep]
        masks = np.arange(len(self.exclusive_counts))
        new = np.zeros(len(masks), np.int64)
        for j, k in enumerate(idx):
            new |= ((masks >> k) & 1) << j
        counts = np.bincount(new, weights=self.exclusive_counts, minlength=1 << len(keep))
        return CrossSectionSet(tuple(keep), counts.astype(np.int64), self.tangent_area, self.sample_count,
                               self.secondary_boost)


def cross_sections(table: DepositionTable, acceptance: Mapping[str, tuple] | None = None) -> CrossSectionSet:
    acceptance = dict(acceptance or {})
    for lab, (lo, hi) in acceptance.items():
        if lab not in table.labels:
            raise ConfigError(f"acceptance window for unknown label {lab!r}")
        if not lo < hi:
            raise ConfigError(f"acceptance window for {lab} is not ordered")
    n = len(table.labels)
    lo = np.array([acceptance.get(lab, (0.0, np.inf))[0] for lab in table.labels])
    hi = np.array([acceptance.get(lab, (0.0, np.inf))[1] for lab in table.labels])
    li = table.label_index.astype(np.int64)
    ok = (table.energy >= lo[li]) & (table.energy <= hi[li])
    rows, inv = np.unique(table.muon_index[ok], return_inverse=True)
    mask = np.zeros(len(rows), np.int64)
    np.bitwise_or.at(mask, inv, 1 << li[ok])
    counts = np.bincount(mask, minlength=1 << n).astype(np.int64)
    counts[0] = table.total_thrown - len(rows)
    return CrossSectionSet(table.labels, counts, table.tangent_area, table.total_thrown, table.secondary_boost)


def _eff(efficiencies, label):
    return float(efficiencies.get(label, 1.0)) if efficiencies is not None else 1.0


def _others_any(xs: CrossSectionSet, target: str, efficiencies):
    """Per mask containing target: probability that at least one other member is detected."""
    t = xs.labels.index(target)
    masks = np.arange(len(xs.exclusive_counts))
    miss = np.ones(len(masks))
    for k, lab in enumerate(xs.labels):
        if k == t:
            continue
        eb = 1.0 - _eff(efficiencies, lab)
        miss = np.where(masks >> k & 1, miss * eb, miss)
    has_t = (masks >> t & 1).astype(bool)
    return has_t, 1.0 - miss


def coverage_of(target: str, xs: CrossSectionSet, efficiencies=None, window_eff: float = 1.0) -> float:
    if target not in xs.labels:
        raise ConfigError(f"unknown target {target!r}")
    sig_t = xs.sigma(target)
    if sig_t <= 0:
        raise CoverageError(f"sigma_{target} is zero; coverage undefined")
    has_t, p_any = _others_any(xs, target, efficiencies)
    s = xs.exclusive_array()
    return float(window_eff * np.sum(p_any[has_t] * s[has_t]) / sig_t)


def coverage_from_collective(sigma_t: float, sigma_t_any: float, eps_any: float, window_eff: float) -> float:
    """Coverage with a single collective efficiency for 'any other volume'."""
    if sigma_t <= 0:
        raise CoverageError("sigma_target is zero; coverage undefined")
    return window_eff * eps_any * sigma_t_any / sigma_t


def any_coincidence_rate(target: str, xs: CrossSectionSet, efficiencies=None, flux: float = 0.0) -> float:
    if target not in xs.labels:
        raise ConfigError(f"unknown target {target!r}")
    has_t, p_any = _others_any(xs, target, efficiencies)
    s = xs.exclusive_array()
    return float(_eff(efficiencies, target) * np.sum(p_any[has_t] * s[has_t]) * flux)


def single_rate(target: str, xs: CrossSectionSet, efficiencies=None, flux: float = 0.0) -> float:
    """r_d = eps_d sigma_d Phi, the rate of any detected deposit in ``target``."""
    return _eff(efficiencies, target) * xs.sigma(target) * flux
