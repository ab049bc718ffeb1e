"""Run configuration: one YAML file, deep-merged over the experiment defaults."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .. import layout
from ..detcal import DEFAULT_COMBOS, ResponseParams
from ..fluxmc import ConfigError, FluxModel, SamplerConfig
from ..geometry import DepositionModel, Prism, Scene
from ..streamsim import AmplitudeLaw, QubitParams, TimebaseConfig


def _defaults() -> dict:
    return {
        "seed": 20240101,
        "output_dir": "out",
        "threads": 1,
        "timebase": dict(cycle_duration=15.274e-6, cycles_per_entry=1_000_000, inter_entry_gap=12.0,
                         ref_pulse_period=100, clock_skew=0.0, measure_phase=1.4),
        "run": dict(n_entries=20, write_shots=False),
        "flux": dict(phi=layout.FLUX, scale_c_mu=1.0, e_min=10.0, e_max=1000.0, spectral_index=2.7),
        "sampler": {
            "detector": dict(side=layout.DETECTOR_FOCUS["side"], center=list(layout.DETECTOR_FOCUS["center"]),
                             count=2_000_000, radius=1500.0),
            "chip": dict(side=layout.CHIP_FOCUS["side"], center=list(layout.CHIP_FOCUS["center"]),
                         count=2_000_000, radius=1500.0),
        },
        "scene": {
            "de_dx": 2.0,
            "fractional_smear": 0.0,
            "secondary_boost": 1.0,
            "chip": dict(label=layout.CHIP_LABEL, dims=list(layout.CHIP_DIMS), center=[0.0, 0.0, 0.0],
                         de_dx=layout.CHIP_DE_DX),
            "detectors": {k: dict(dims=list(v[0]), center=list(v[1])) for k, v in layout.DETECTORS.items()},
        },
        "detectors": {k: dict(a=v[2], b=v[3], v_lo=v[4], v_hi=v[5], efficiency=layout.DETECTOR_EFFICIENCY)
                      for k, v in layout.DETECTORS.items()},
        "qubits": {
            "effective_delay": 3e-6,
            "wait_time": 10.2e-6,
            "fidelity_a": 1.0,
            "params": {k: dict(t1=v[0], tau=v[1]) for k, v in layout.QUBITS.items()},
        },
        "bursts": {
            "r_other": layout.EVENT_RATE * (1 - layout.COSMIC_FRACTION),
            "cosmic": dict(participation=0.75, dgamma_lo=0.05e6, dgamma_hi=2.0e6),
            "other": dict(participation=[float(x) for x in np.linspace(0.45, 0.62, 10)],
                          dgamma_lo=0.05e6, dgamma_hi=2.0e6),
        },
        "detection": dict(template_length=1648, decay_tau=5e-3, candidate_threshold=50.0,
                          accept_threshold=105.0, min_separation=12.5e-3, bin_cycles=40, pre_cycles=1880,
                          pre_gap=0, post_cycles=1960, participation_threshold=0.2e6,
                          injection_events=3000, injection_per_entry=20),
        "coincidence": dict(window_cycles=3, snr_windows=[1, 3, 5, 7, 9, 11, 13], histogram_bin_cycles=200,
                            histogram_range_cycles=20000),
        "calibration": dict(combos=["".join(c) for c in DEFAULT_COMBOS], n_bins=80, cluster_window_ns=1000.0,
                            init_perturbation=0.0, maxiter=6000),
    }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    raw: dict

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "RunConfig":
        data = {}
        if path is not None:
            try:
                data = yaml.safe_load(Path(path).read_text()) or {}
            except (OSError, yaml.YAMLError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError("config root must be a mapping")
        cfg = cls(_merge(_merge(_defaults(), data), overrides or {}))
        cfg.validate()
        return cfg

    def __getitem__(self, k):
        return self.raw[k]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def hash(self) -> str:
        body = {k: v for k, v in self.raw.items() if k not in ("output_dir", "threads")}
        return hashlib.sha256(json.dumps(body, sort_keys=True, default=float).encode()).hexdigest()[:16]

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    # --- typed views ------------------------------------------------------

    def timebase(self) -> TimebaseConfig:
        return TimebaseConfig(**self.raw["timebase"])

    def flux_model(self) -> FluxModel:
        f = self.raw["flux"]
        return FluxModel(scale_c_mu=f["scale_c_mu"], e_min=f["e_min"], e_max=f["e_max"],
                         spectral_index=f["spectral_index"])

    @property
    def phi(self) -> float:
        return float(self.raw["flux"]["phi"])

    def sampler(self, which: str) -> SamplerConfig:
        s = self.raw["sampler"][which]
        seed_offset = {"detector": 1, "chip": 2}[which]
        return SamplerConfig(float(s["side"]), int(s["count"]), self.seed + seed_offset,
                             float(s.get("radius", 1500.0)), tuple(float(c) for c in s["center"]))

    def scene(self) -> Scene:
        s = self.raw["scene"]
        ch = s["chip"]
        prisms = [Prism.from_dims(ch["label"], ch["dims"], ch["center"])]
        for lab, d in s["detectors"].items():
            prisms.append(Prism.from_dims(lab, d["dims"], d["center"]))
        model = DepositionModel(float(s["de_dx"]), float(s["fractional_smear"]), float(s["secondary_boost"]),
                                {ch["label"]: float(ch["de_dx"])})
        return Scene(tuple(prisms), model)

    @property
    def chip_label(self) -> str:
        return self.raw["scene"]["chip"]["label"]

    @property
    def detector_labels(self) -> tuple:
        return tuple(self.raw["detectors"])

    def responses(self) -> dict:
        return {k: ResponseParams(k, float(d["a"]), float(d["b"]), float(d["v_lo"]), float(d["v_hi"]))
                for k, d in self.raw["detectors"].items()}

    def efficiencies(self) -> dict:
        return {k: float(d.get("efficiency", 1.0)) for k, d in self.raw["detectors"].items()}

    def qubits(self) -> list:
        q = self.raw["qubits"]
        return [QubitParams(lab, 1.0 / float(p["t1"]), float(p["tau"]), float(q["effective_delay"]),
                            float(p.get("fidelity_a", q["fidelity_a"])), float(q["wait_time"]))
                for lab, p in q["params"].items()]

    def amplitude_law(self, source: str) -> AmplitudeLaw:
        b = self.raw["bursts"][source]
        n = len(self.raw["qubits"]["params"])
        part = b["participation"]
        part = tuple(float(x) for x in part) if isinstance(part, (list, tuple)) else (float(part),) * n
        return AmplitudeLaw(part, float(b["dgamma_lo"]), float(b["dgamma_hi"]))

    def validate(self):
        try:
            self.timebase()
            scene = self.scene()
            self.responses()
            self.qubits()
            for src in ("cosmic", "other"):
                law = self.amplitude_law(src)
                if len(law.participation) != len(self.raw["qubits"]["params"]):
                    raise ConfigError(f"{src} participation needs one value per qubit")
            self.sampler("detector")
            self.sampler("chip")
        except (TypeError, KeyError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        for lab in self.detector_labels:
            if lab not in scene.labels:
                raise ConfigError(f"detector {lab} has no volume in the scene")
        for combo in self.raw["calibration"]["combos"]:
            for ch in combo:
                if ch not in self.detector_labels:
                    raise ConfigError(f"calibration combination {combo} uses unknown detector {ch}")
        if self.raw["coincidence"]["window_cycles"] % 2 == 0:
            raise ConfigError("coincidence window must be odd")
