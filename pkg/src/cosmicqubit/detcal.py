"""Detector energy response: V = a E_s with E_s ~ N(E, b sqrt(E0 E)) truncated at 0.

Deposit distributions live on a per-detector grid of cells.  Each cell is
treated as a uniform slab of energy, so the probability to land in an
amplitude bin is an exact integral (no quadrature noise, and b = 0 reduces to
a rescaling of the histogram).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numba
import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit, ndtr

E0 = 5.0  # MeV, reference energy of the resolution
N_GRID = 2048


class FitFailure(RuntimeError):
    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


@dataclass(frozen=True)
class ResponseParams:
    label: str
    a: float
    b: float
    v_lo: float
    v_hi: float

    def __post_init__(self):
        if self.a <= 0 or self.b < 0 or not self.v_lo < self.v_hi:
            raise ValueError(f"{self.label}: need a > 0, b >= 0, v_lo < v_hi")

    @property
    def e_window(self) -> tuple:
        return self.v_lo / self.a, self.v_hi / self.a

    def sigma(self, energy):
        return self.b * np.sqrt(E0 * np.asarray(energy, dtype=float))


@dataclass
class SpectrumHistogram:
    edges: np.ndarray
    counts: np.ndarray
    combo: tuple
    detector: str


def energy_grid(e_top: float, n: int = N_GRID) -> np.ndarray:
    """Cell edges on [0, 1.5 e_top]."""
    return np.linspace(0.0, 1.5 * e_top, n + 1)


def deposit_pdf(energies, edges: np.ndarray, weights=None) -> np.ndarray:
    """Cell masses of a deposit distribution; mass above the grid goes into the last cell."""
    e = np.asarray(energies, dtype=float)
    w = np.ones_like(e) if weights is None else np.asarray(weights, dtype=float)
    idx = np.clip(np.searchsorted(edges, e, side="right") - 1, 0, len(edges) - 2)
    m = np.bincount(idx, weights=w, minlength=len(edges) - 1)
    tot = m.sum()
    return m / tot if tot > 0 else m


# below this width relative to a cell the smeared CDF loses precision to
# cancellation and is indistinguishable from the unsmeared one
_SHARP = 1e-8


def _psi(x):
    return x * ndtr(x) + np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)


def _cell_cdf(y, e1, e2, sigma):
    """P(E_s < y) for E uniform on [e1, e2] plus Gaussian noise; shapes broadcast."""
    h = e2 - e1
    with np.errstate(divide="ignore", invalid="ignore"):
        g = sigma / h * (_psi((y - e1) / sigma) - _psi((y - e2) / sigma))
    box = np.clip((y - e1) / h, 0.0, 1.0)
    return np.where(sigma > _SHARP * h, g, box)


@numba.njit(cache=True)
def _psi_scalar(x):
    return x * 0.5 * math.erfc(-x / math.sqrt(2.0)) + math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


@numba.njit(cache=True)
def _cell_cdf_scalar(y, e1, e2, sigma):
    h = e2 - e1
    if y <= e1 - 8.0 * sigma:
        return 0.0
    if y >= e2 + 8.0 * sigma:
        return 1.0
    if sigma > _SHARP * h:
        return sigma / h * (_psi_scalar((y - e1) / sigma) - _psi_scalar((y - e2) / sigma))
    return min(max((y - e1) / h, 0.0), 1.0)


@numba.njit(cache=True)
def _response_kernel(e1, e2, sig, y, out):
    for i in range(e1.shape[0]):
        c0 = _cell_cdf_scalar(0.0, e1[i], e2[i], sig[i])
        z = 1.0 - c0
        if z <= 0:
            z = 1.0
        prev = (_cell_cdf_scalar(y[0], e1[i], e2[i], sig[i]) - c0) / z
        for j in range(1, y.shape[0]):
            cur = (_cell_cdf_scalar(y[j], e1[i], e2[i], sig[i]) - c0) / z
            # differences of nearly equal CDF values can round below zero
            out[j - 1, i] = cur - prev if cur > prev else 0.0
            prev = cur


def response_matrix(cell_edges: np.ndarray, v_edges: np.ndarray, a: float, b: float,
                    cells: slice | None = None) -> np.ndarray:
    """K[j, i] = P(a E_s in v bin j | E in cell i), negative E_s excluded and renormalized."""
    e1 = np.ascontiguousarray(cell_edges[:-1], dtype=float)
    e2 = np.ascontiguousarray(cell_edges[1:], dtype=float)
    if cells is not None:
        e1, e2 = e1[cells], e2[cells]
    sig = b * np.sqrt(E0 * 0.5 * (e1 + e2))
    y = np.asarray(v_edges, dtype=float) / a
    out = np.empty((len(y) - 1, len(e1)))
    _response_kernel(e1, e2, sig, y, out)
    return out


def response_matrix_reference(cell_edges, v_edges, a, b):
    """Vectorized numpy form of :func:`response_matrix`, kept as a cross-check."""
    e1 = cell_edges[:-1]
    e2 = cell_edges[1:]
    sig = b * np.sqrt(E0 * 0.5 * (e1 + e2))
    y = (np.asarray(v_edges, dtype=float) / a)[:, None]
    cdf = _cell_cdf(y, e1[None, :], e2[None, :], sig[None, :])
    c0 = _cell_cdf(np.zeros((1, 1)), e1[None, :], e2[None, :], sig[None, :])
    z = 1.0 - c0
    cdf = (cdf - c0) / np.where(z > 0, z, 1.0)
    return np.diff(cdf, axis=0)


def amplitude_pdf(masses: np.ndarray, cell_edges: np.ndarray, params: ResponseParams,
                  v_edges: np.ndarray) -> np.ndarray:
    """Probability per amplitude bin for the given cell masses."""
    return response_matrix(cell_edges, v_edges, params.a, params.b) @ masses


def amplitude_density(masses, cell_edges, params: ResponseParams, v_edges) -> np.ndarray:
    return amplitude_pdf(masses, cell_edges, params, v_edges) / np.diff(v_edges)


def expected_counts(bin_prob: np.ndarray, rate: float, duration: float) -> np.ndarray:
    return rate * duration * np.asarray(bin_prob, dtype=float)


def poisson_deviance(expected, observed) -> float:
    """sum(E - O + O ln O - O ln E); the O ln O term is 0 for O = 0."""
    e = np.asarray(expected, dtype=float)
    o = np.asarray(observed, dtype=float)
    if np.any((e <= 0) & (o > 0)):
        return np.inf
    pos = o > 0
    t = e - o
    t[pos] += o[pos] * (np.log(o[pos]) - np.log(e[pos]))
    return float(t.sum())


# --- calibration problem --------------------------------------------------

DEFAULT_COMBOS = (("A",), ("B",), ("C",), ("D",), ("E",), ("F",), ("B", "C"), ("C", "D"), ("A", "D"),
                  ("B", "C", "D"), ("A", "E"), ("E", "F"), ("A", "F"), ("A", "E", "F"))


def acceptance_probability(energy, params: ResponseParams):
    """P(V_lo <= a E_s <= V_hi) for exact deposits."""
    e = np.asarray(energy, dtype=float)
    lo, hi = params.e_window
    if params.b == 0:
        return ((e >= lo) & (e <= hi)).astype(float)
    s = params.sigma(e)
    z = ndtr(e / s)
    return (ndtr((hi - e) / s) - ndtr((lo - e) / s)) / np.where(z > 0, z, 1.0)


@dataclass
class CalibrationData:
    """Deposits (rows x labels, 0 = none) from one throw sample plus observed spectra.

    ``spectra[(combo, k)]`` holds counts of detector k's amplitudes in bins
    ``v_edges[k]``, for clusters in which every other member of ``combo`` fired
    inside its window (other detectors unconstrained).
    """

    labels: tuple
    energies: np.ndarray
    area_per_throw: float
    duration: float
    v_edges: dict
    spectra: dict
    combos: tuple = DEFAULT_COMBOS


def amplitude_edges(params: ResponseParams, n_bins: int = 80) -> np.ndarray:
    return np.linspace(params.v_lo, params.v_hi, n_bins + 1)


class CalibrationModel:
    """Expected spectra as a function of (a_k, b_k, eps, Phi)."""

    def __init__(self, labels, energies, area_per_throw, duration, v_edges, combos, e_top):
        self.labels = tuple(labels)
        self.energies = np.asarray(energies, dtype=float)
        self.area = float(area_per_throw)
        self.duration = float(duration)
        self.v_edges = dict(v_edges)
        self.combos = tuple(tuple(c) for c in combos)
        self.grid = {k: energy_grid(e_top[k]) for k in self._detectors()}
        cols = {k: self.labels.index(k) for k in self._detectors()}
        self._rows = {}
        self._cell = {}
        for combo in self.combos:
            m = np.all(self.energies[:, [cols[k] for k in combo]] > 0, axis=1)
            self._rows[combo] = np.nonzero(m)[0]
        for k in self._detectors():
            e = self.energies[:, cols[k]]
            self._cell[k] = np.clip(np.searchsorted(self.grid[k], e, side="right") - 1, 0, N_GRID - 1)
        self._cols = cols

    def _detectors(self):
        return sorted({k for c in self.combos for k in c}, key=lambda k: self.labels.index(k))

    def expected(self, params: Mapping[str, ResponseParams], eps: float, flux: float) -> dict:
        out = {}
        dets = self._detectors()
        kmat = {k: response_matrix(self.grid[k], self.v_edges[k], params[k].a, params[k].b) for k in dets}
        acc = {}
        for combo in self.combos:
            rows = self._rows[combo]
            if len(combo) > 1:
                for k in combo:
                    key = (k, combo)
                    if key not in acc:
                        acc[key] = acceptance_probability(self.energies[rows, self._cols[k]], params[k])
            scale = flux * self.area * self.duration * eps ** len(combo)
            for k in combo:
                w = np.ones(len(rows))
                for m in combo:
                    if m != k:
                        w = w * acc[(m, combo)]
                masses = np.bincount(self._cell[k][rows], weights=w, minlength=N_GRID)
                out[(combo, k)] = scale * (kmat[k] @ masses)
        return out

    def deviance(self, params, eps, flux, observed: dict, floor: float = 0.0) -> float:
        """Summed deviance; ``floor`` > 0 lifts expected counts off zero so an
        optimizer sees a finite (steep) cost instead of the infinite sentinel."""
        exp = self.expected(params, eps, flux)
        if floor > 0:
            exp = {key: np.maximum(v, floor) for key, v in exp.items()}
        return sum(poisson_deviance(exp[key], observed[key]) for key in exp)

    def single_shape(self, k: str, a: float, b: float) -> np.ndarray:
        """Unnormalized amplitude spectrum of all deposits in ``k`` (no coincidence condition)."""
        masses = np.bincount(self._cell[k][self._rows[(k,)]], minlength=N_GRID).astype(float)
        return response_matrix(self.grid[k], self.v_edges[k], a, b) @ masses

    def scan_gain(self, k: str, observed: np.ndarray, a0: float, b0: float, span: float = 1.8,
                  n: int = 121) -> float:
        """Gain minimizing the shape-only deviance of detector k's singles spectrum over a log grid."""
        best, best_a = np.inf, a0
        tot = observed.sum()
        for a in np.geomspace(a0 / span, a0 * span, n):
            e = self.single_shape(k, a, b0)
            if e.sum() <= 0:
                continue
            d = poisson_deviance(np.maximum(e * tot / e.sum(), 1e-9), observed)
            if d < best:
                best, best_a = d, a
        return float(best_a)


@dataclass
class FitResult:
    params: dict
    eps: float
    flux: float
    errors: dict
    cost: float
    n_bins: int
    converged: bool
    message: str = ""
    history: list = field(default_factory=list)


def _pack(params, labels, eps, flux):
    x = []
    for k in labels:
        x += [np.log(params[k].a), params[k].b]
    return np.array(x + [logit(min(max(eps, 1e-6), 1 - 1e-6)), np.log(flux)])


def _unpack(x, template, labels):
    out = {}
    for i, k in enumerate(labels):
        p = template[k]
        out[k] = ResponseParams(k, float(np.exp(x[2 * i])), float(abs(x[2 * i + 1])), p.v_lo, p.v_hi)
    return out, float(expit(x[-2])), float(np.exp(x[-1]))


def fit_response(model: CalibrationModel, observed: dict, init: Mapping[str, ResponseParams],
                 eps0: float = 0.9, flux0: float | None = None, maxiter: int = 1500,
                 scan: bool = True) -> FitResult:
    """Minimize the summed deviance.

    Each gain is first located by a coarse shape scan of that detector's
    singles spectrum (the optimizer alone stalls when the muon peak starts far
    from its observed position), and the flux is started from the total singles
    count.  Then a quasi-Newton pass, a bounded simplex pass to get out of any
    stall, and a second quasi-Newton polish.  Standard errors come from the
    inverse Hessian of the deviance in the natural parameters (a, b, eps, Phi).
    """
    labels = model._detectors()
    start = dict(init)
    if scan:
        for k in labels:
            if (k,) in model.combos and observed[((k,), k)].sum() > 0:
                a = model.scan_gain(k, observed[((k,), k)], init[k].a, init[k].b)
                start[k] = ResponseParams(k, a, init[k].b, init[k].v_lo, init[k].v_hi)
    if flux0 is None:
        pred = model.expected(start, eps0, 1.0)
        singles = [(observed[key].sum(), pred[key].sum()) for key in pred if len(key[0]) == 1]
        o = sum(x for x, _ in singles)
        e = sum(y for _, y in singles)
        flux0 = o / e if e > 0 and o > 0 else 0.013
    x0 = _pack(start, labels, eps0, flux0)

    def cost(x):
        p, e, f = _unpack(x, init, labels)
        c = model.deviance(p, e, f, observed, floor=1e-9)
        return c if np.isfinite(c) else 1e30

    r1 = minimize(cost, x0, method="L-BFGS-B", options=dict(maxiter=500))
    step = np.concatenate([np.tile([0.01, 0.003], len(labels)), [0.1, 0.02]])
    simplex = np.vstack([r1.x] + [r1.x + np.eye(len(x0))[i] * step[i] for i in range(len(x0))])
    r2 = minimize(cost, r1.x, method="Nelder-Mead",
                  options=dict(maxiter=maxiter, maxfev=maxiter, xatol=1e-7, fatol=1e-4,
                               initial_simplex=simplex, adaptive=True))
    r3 = minimize(cost, r2.x if r2.fun <= r1.fun else r1.x, method="L-BFGS-B", options=dict(maxiter=500))
    best = min((r1, r2, r3), key=lambda r: r.fun)
    p, e, f = _unpack(best.x, init, labels)
    n_bins = sum(len(v) for v in observed.values())
    errors = _standard_errors(model, observed, p, e, f, labels)
    ok = bool(np.isfinite(best.fun) and best.fun < 1e30)
    res = FitResult(p, e, f, errors, float(best.fun), n_bins, ok and bool(r3.success or r1.success),
                    f"{r1.message}; {r2.message}; {r3.message}")
    if not ok:
        raise FitFailure("calibration fit did not converge", res)
    return res


def _standard_errors(model, observed, params, eps, flux, labels):
    names = []
    x = []
    for k in labels:
        names += [f"a_{k}", f"b_{k}"]
        x += [params[k].a, params[k].b]
    names += ["eps", "Phi"]
    x = np.array(x + [eps, flux])

    def cost(v):
        p = {k: ResponseParams(k, v[2 * i], abs(v[2 * i + 1]), params[k].v_lo, params[k].v_hi)
             for i, k in enumerate(labels)}
        return model.deviance(p, v[-2], v[-1], observed, floor=1e-9)

    h = np.maximum(np.abs(x) * 1e-3, 1e-6)
    n = len(x)
    hess = np.zeros((n, n))
    f0 = cost(x)
    for i in range(n):
        for j in range(i, n):
            ei = np.eye(n)[i] * h[i]
            ej = np.eye(n)[j] * h[j]
            if i == j:
                v = (cost(x + ei) - 2 * f0 + cost(x - ei)) / h[i] ** 2
            else:
                v = (cost(x + ei + ej) - cost(x + ei - ej) - cost(x - ei + ej) + cost(x - ei - ej)) / (4 * h[i] * h[j])
            hess[i, j] = hess[j, i] = v
    try:
        cov = np.linalg.inv(hess)  # deviance = -ln L, so the covariance is H^-1
        err = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        err = np.full(n, np.nan)
    return dict(zip(names, err))


# --- observed spectra from pulse clusters --------------------------------


def cluster_pulses(timestamp_ns: np.ndarray, window_ns: float = 1000.0) -> np.ndarray:
    """Cluster id per pulse: consecutive pulses within ``window_ns`` share a cluster."""
    t = np.asarray(timestamp_ns)
    if len(t) == 0:
        return np.zeros(0, np.int64)
    brk = np.concatenate([[True], np.diff(t) > window_ns])
    return np.cumsum(brk) - 1


def observed_spectra(labels, detector, timestamp_ns, amplitude, params: Mapping[str, ResponseParams],
                     v_edges: Mapping[str, np.ndarray], combos=DEFAULT_COMBOS, window_ns: float = 1000.0):
    """Histograms per (combo, detector) from time-ordered pulses."""
    cid = cluster_pulses(timestamp_ns, window_ns)
    n_cl = int(cid.max()) + 1 if len(cid) else 0
    amp = {}
    inwin = {}
    for i, k in enumerate(labels):
        if k not in params:
            continue
        sel = detector == i
        a = np.full(n_cl, np.nan)
        a[cid[sel]] = amplitude[sel]  # one pulse per detector per cluster
        amp[k] = a
        inwin[k] = (a >= params[k].v_lo) & (a <= params[k].v_hi)
    out = {}
    for combo in combos:
        for k in combo:
            m = np.isfinite(amp[k])
            for o in combo:
                if o != k:
                    m &= inwin[o]
            out[(tuple(combo), k)] = np.histogram(amp[k][m], bins=v_edges[k])[0].astype(float)
    return out


def format_params_table(params: Mapping[str, ResponseParams], errors: Mapping[str, float] | None = None) -> str:
    errors = errors or {}
    lines = ["# label  a(ADC/MeV)  a_err  b(%)  b_err(%)  V_lo  V_hi  E_lo(MeV)  E_hi(MeV)"]
    for k, p in params.items():
        lo, hi = p.e_window
        lines.append(f"{k}  {p.a:.4f}  {errors.get('a_' + k, float('nan')):.4f}  {100 * p.b:.3f}  "
                     f"{100 * errors.get('b_' + k, float('nan')):.3f}  {p.v_lo:g}  {p.v_hi:g}  {lo:.2f}  {hi:.2f}")
    return "\n".join(lines) + "\n"
