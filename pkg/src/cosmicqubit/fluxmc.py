"""Cosmic-ray muon sampling from the Gaisser flux with tangent-square throwing.

Directions follow the cos^2(theta) zenith law.  A throw picks (theta, phi) on a
hemisphere of radius R, places a square of side l tangent to the hemisphere at
that point, picks a uniform origin on the square and sends the muon along the
inward normal.  Each throw therefore represents an area l^2 of flux, which is
how cross-sections are later normalized.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import _rng

N_ENERGY_KNOTS = 1024


class DomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FluxModel:
    scale_c_mu: float = 1.0
    e_min: float = 10.0
    e_max: float = 1000.0
    spectral_index: float = 2.7
    branch1_scale: float = 1.1 / 115.0
    branch2_weight: float = 0.054
    branch2_scale: float = 1.1 / 850.0

    def spectrum(self, energy):
        """Energy shape E^-gamma [1/(1+k1 E) + w/(1+k2 E)], no angular factor."""
        e = np.asarray(energy, dtype=float)
        return e ** (-self.spectral_index) * (
            1.0 / (1.0 + self.branch1_scale * e) + self.branch2_weight / (1.0 + self.branch2_scale * e)
        )


@dataclass(frozen=True)
class SamplerConfig:
    tangent_side_l: float
    sample_count_n: int
    rng_seed: int = 0
    hemisphere_radius: float = 1500.0
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.tangent_side_l <= 0 or self.hemisphere_radius <= 0:
            raise ConfigError("tangent side and hemisphere radius must be positive")
        if self.sample_count_n < 0:
            raise ConfigError("sample count must be nonnegative")


@dataclass
class MuonSample:
    origin: np.ndarray
    direction: np.ndarray
    energy: float


@dataclass
class MuonBatch:
    """Columnar batch of throws.  Row i is muon index ``first_index + i``."""

    origin: np.ndarray  # (n, 3) cm
    direction: np.ndarray  # (n, 3)
    energy: np.ndarray  # (n,) GeV
    tangent_side_l: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    first_index: int = 0

    def __len__(self):
        return len(self.energy)

    @property
    def tangent_area(self) -> float:
        return self.tangent_side_l**2

    def __getitem__(self, i) -> MuonSample:
        return MuonSample(self.origin[i].copy(), self.direction[i].copy(), float(self.energy[i]))


def differential_intensity(model: FluxModel, theta, energy):
    theta = np.asarray(theta, dtype=float)
    energy = np.asarray(energy, dtype=float)
    if np.any((theta < 0) | (theta > np.pi / 2)):
        raise DomainError("zenith angle outside [0, pi/2]")
    if np.any((energy < model.e_min) | (energy > model.e_max)):
        raise DomainError("energy outside the model range")
    c = np.cos(theta)
    if np.ndim(theta) == 0:
        c = 0.0 if theta == np.pi / 2 else c
    else:
        c = np.where(theta == np.pi / 2, 0.0, c)
    return model.scale_c_mu * model.spectrum(energy) * c * c


def sample_direction(rng: np.random.Generator, size=None):
    """Zenith with pdf ~ cos^2 sin (CDF 1 - cos^3), uniform azimuth."""
    u = rng.random(size)
    cos_t = np.cbrt(1.0 - u)  # 1-u in (0, 1]; keeps theta < pi/2
    phi = 2.0 * np.pi * rng.random(size)
    return np.arccos(cos_t), phi


@functools.lru_cache(maxsize=16)
def _inverse_cdf(model: FluxModel) -> PchipInterpolator:
    # fine log grid for the cumulative integral, then a 1024-knot monotone inverse
    x = np.linspace(np.log(model.e_min), np.log(model.e_max), 32769)
    e = np.exp(x)
    dens = model.spectrum(e) * e  # dN/dlnE
    cdf = np.concatenate(([0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(x))))
    cdf /= cdf[-1]
    u_knots = np.linspace(0.0, 1.0, N_ENERGY_KNOTS)
    x_knots = np.interp(u_knots, cdf, x)
    return PchipInterpolator(u_knots, x_knots)


def sample_energy(model: FluxModel, rng: np.random.Generator, size=None):
    inv = _inverse_cdf(model)
    e = np.exp(inv(rng.random(size)))
    return np.clip(e, model.e_min, model.e_max)


def _throw_arrays(cfg: SamplerConfig, model: FluxModel, rng, n):
    theta, phi = sample_direction(rng, n)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    normal = np.stack([st * cp, st * sp, ct], axis=-1)
    e1 = np.stack([ct * cp, ct * sp, -st], axis=-1)
    e2 = np.stack([-sp, cp, np.zeros_like(phi)], axis=-1)
    half = 0.5 * cfg.tangent_side_l
    s = rng.uniform(-half, half, n)[:, None]
    t = rng.uniform(-half, half, n)[:, None]
    center = np.asarray(cfg.center, dtype=float)
    origin = center + cfg.hemisphere_radius * normal + s * e1 + t * e2
    energy = sample_energy(model, rng, n)
    return origin, -normal, energy


def throw_muon(cfg: SamplerConfig, model: FluxModel, rng: np.random.Generator) -> MuonSample:
    origin, direction, energy = _throw_arrays(cfg, model, rng, 1)
    return MuonSample(origin[0], direction[0], float(energy[0]))


def throw_batch(cfg: SamplerConfig, model: FluxModel, start: int = 0, stop: int | None = None) -> MuonBatch:
    """Throw muons [start, stop) of the configured sample.

    Each block of ``_rng.BLOCK`` indices has its own stream, so any partition of
    the index range reproduces the same muons.
    """
    stop = cfg.sample_count_n if stop is None else stop
    parts = []
    blocks = range(start // _rng.BLOCK, (stop - 1) // _rng.BLOCK + 1) if stop > start else ()
    for b in blocks:
        rng = _rng.stream(cfg.rng_seed, "muons", b)
        o, d, e = _throw_arrays(cfg, model, rng, _rng.BLOCK)
        lo = max(start - b * _rng.BLOCK, 0)
        hi = min(stop - b * _rng.BLOCK, _rng.BLOCK)
        parts.append((o[lo:hi], d[lo:hi], e[lo:hi]))
    if parts:
        o, d, e = (np.concatenate(x) for x in zip(*parts))
    else:
        o, d, e = np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0)
    return MuonBatch(o, d, e, cfg.tangent_side_l, np.asarray(cfg.center, dtype=float), start)


def check_side_length(cfg: SamplerConfig, corners: np.ndarray) -> float:
    """Return d, the farthest scene point from the hemisphere center; raise if l <= 2d."""
    corners = np.asarray(corners, dtype=float).reshape(-1, 3)
    if len(corners) == 0:
        return 0.0
    d = float(np.max(np.linalg.norm(corners - np.asarray(cfg.center, dtype=float), axis=1)))
    if not cfg.tangent_side_l > 2.0 * d:
        raise ConfigError(f"tangent side {cfg.tangent_side_l} cm must exceed 2d = {2 * d:.3f} cm")
    return d
