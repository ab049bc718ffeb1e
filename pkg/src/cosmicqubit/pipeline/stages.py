"""Pipeline stages.  Each stage reads its inputs from the output directory,
writes its artifacts atomically, and is a pure function of inputs + seed."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import _rng
from ..burstdetect import EventCatalog, detect_events, event_dynamics, make_template, participation_histogram, \
    relaxation_series
from ..coinstat import WindowConfig, background_histogram, decompose_rates, estimate_flux_and_efficiency, \
    nearest_delays, rate_from_counts, snr_vs_window
from ..detcal import CalibrationModel, FitFailure, ResponseParams, amplitude_edges, cluster_pulses, fit_response, \
    format_params_table, observed_spectra
from ..fluxmc import throw_batch
from ..geometry import coverage_of, cross_sections, run_transport
from ..streamsim import BurstTruth, MuonSource, render_entry, render_pulses, emit_reference_pulses, \
    simulate_truth
from . import formats as fm
from .config import RunConfig
from .sync import assign_pulses, build_all

log = logging.getLogger(__name__)

STAGES = ("sample", "transport", "xsection", "simulate", "detect", "coincide", "calibrate", "report")


class DependencyError(RuntimeError):
    pass


@dataclass
class Context:
    cfg: RunConfig
    out: Path

    def path(self, name: str) -> Path:
        return self.out / name

    def need(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DependencyError(f"missing {p.name}: run stage '{stage}' first")
        return p

    @property
    def meta(self) -> dict:
        return fm.stamp(self.cfg.hash(), self.cfg.seed)


# --- sample / transport / xsection ---------------------------------------


def stage_sample(ctx: Context):
    for which in ("detector", "chip"):
        scfg = ctx.cfg.sampler(which)
        batch = throw_batch(scfg, ctx.cfg.flux_model())
        fm.write_muons(ctx.path(f"muons_{which}.bin"), batch, ctx.meta)
        log.info("sampled %d %s-focused muons", len(batch), which)


def _transport(ctx: Context, which: str):
    batch = fm.read_muons(ctx.need(f"muons_{which}.bin", "sample"))
    scene = ctx.cfg.scene()
    relevant = [ctx.cfg.chip_label] if which == "chip" else list(ctx.cfg.detector_labels)
    rng = _rng.stream(ctx.cfg.seed, "transport", 0 if which == "detector" else 1)
    return run_transport(batch, scene, rng, relevant=relevant)


def stage_transport(ctx: Context):
    for which in ("detector", "chip"):
        table = _transport(ctx, which)
        fm.write_deposits(ctx.path(f"deposits_{which}.npz"), table, ctx.meta)
        log.info("%s table: %d muons with deposits", which, table.n_rows)


def energy_windows(cfg: RunConfig, responses=None) -> dict:
    responses = responses or cfg.responses()
    return {k: p.e_window for k, p in responses.items()}


def stage_xsection(ctx: Context):
    win = energy_windows(ctx.cfg)
    for which in ("detector", "chip"):
        table = fm.read_deposits(ctx.need(f"deposits_{which}.npz", "transport"))
        xs = cross_sections(table, win)
        fm.write_xsections(ctx.path(f"xsection_{which}.txt"), xs, ctx.meta)


# --- simulate -------------------------------------------------------------


def _sources(ctx: Context):
    det = fm.read_deposits(ctx.need("deposits_detector.npz", "transport"))
    chip = fm.read_deposits(ctx.need("deposits_chip.npz", "transport"))
    q = ctx.cfg.chip_label
    return [MuonSource(det, forbid=q), MuonSource(chip, require=q)]


def stage_simulate(ctx: Context):
    cfg = ctx.cfg
    tb = cfg.timebase()
    n_entries = int(cfg["run"]["n_entries"])
    sources = _sources(ctx)
    truth, stream = simulate_truth(sources, cfg.phi, float(cfg["bursts"]["r_other"]), n_entries, tb,
                                   cfg.amplitude_law("cosmic"), cfg.amplitude_law("other"),
                                   _rng.stream_seed(cfg.seed, "simulate"), cfg.chip_label)
    qlabels = [q.label for q in cfg.qubits()]
    fm.write_truth(ctx.path("truth.csv"), truth, qlabels, dict(ctx.meta, n_entries=n_entries))
    fm.write_array(ctx.path("muon_stream.npz"), dict(ctx.meta, labels=list(stream.labels)),
                   time=stream.time, source=stream.source, row=stream.row, muon_index=stream.muon_index(),
                   energy=stream.energies())
    pulses = render_pulses(stream, cfg.responses(), cfg.efficiencies(), tb, _rng.stream_seed(cfg.seed, "pulses"))
    fm.write_pulses(ctx.path("pulses.npz"), pulses, ctx.meta)
    ref = emit_reference_pulses(tb, range(n_entries))
    fm.write_array(ctx.path("refpulses.npz"), dict(ctx.meta, n_entries=n_entries), timestamp_ns=ref)
    if cfg["run"].get("write_shots"):
        truth = fm.read_truth(ctx.path("truth.csv"))
        with fm.ShotWriter(ctx.path("shots.bin"), len(qlabels), ctx.meta) as w:
            for entry, bits in _iter_rendered(ctx, truth, n_entries):
                w.write(bits)
    log.info("simulated %d entries: %d bursts, %d muons, %d pulses", n_entries, len(truth), len(stream), len(pulses))


def _iter_rendered(ctx: Context, truth, n_entries):
    qubits = ctx.cfg.qubits()
    tb = ctx.cfg.timebase()
    seed = _rng.stream_seed(ctx.cfg.seed, "shots")
    by_entry = {}
    for b in truth:
        by_entry.setdefault(b.entry, []).append(b)
    for e in range(n_entries):
        yield e, render_entry(e, by_entry.get(e - 1, []) + by_entry.get(e, []), qubits, tb, seed)


def _iter_shots(ctx: Context):
    """Shot entries from shots.bin when present, else rendered from the truth file
    (identical either way: both come from the same truth and seed)."""
    if ctx.path("shots.bin").exists():
        for s in fm.iter_shots(ctx.path("shots.bin")):
            yield s.entry, s
        return
    truth = fm.read_truth(ctx.need("truth.csv", "simulate"))
    n = int(fm.read_text_meta(ctx.path("truth.csv"))["n_entries"])
    yield from _iter_rendered(ctx, truth, n)


# --- detect ---------------------------------------------------------------


def _template(cfg: RunConfig):
    d = cfg["detection"]
    return make_template(cfg.timebase().cycle_duration, int(d["template_length"]), float(d["decay_tau"]))


def _detect_entry(cfg, template, entry, shots):
    d = cfg["detection"]
    counts = relaxation_series(shots.bits)
    return detect_events(counts, template, float(d["candidate_threshold"]), float(d["accept_threshold"]),
                         float(d["min_separation"]), entry, shots.start_ns)


def injection_study(cfg: RunConfig, n_events: int | None = None, per_entry: int | None = None,
                    seed: int | None = None):
    """Inject cosmic-law bursts at known onsets into quiet entries and measure
    the onset-lag distribution of the detected ones.

    Returns (window efficiency, lags of detected bursts in cycles, n injected).
    """
    d = cfg["detection"]
    n_events = int(d["injection_events"]) if n_events is None else n_events
    per_entry = int(d["injection_per_entry"]) if per_entry is None else per_entry
    seed = _rng.stream_seed(cfg.seed, "injection") if seed is None else seed
    tb = cfg.timebase()
    qubits = cfg.qubits()
    law = cfg.amplitude_law("cosmic")
    template = _template(cfg)
    half = WindowConfig(int(cfg["coincidence"]["window_cycles"]), tb.cycle_duration).half
    rng = _rng.stream(seed, "injection-onsets")
    spacing = tb.cycles_per_entry // (per_entry + 1)
    lags = []
    n_entries = -(-n_events // per_entry)
    injected = 0
    for e in range(n_entries):
        k = min(per_entry, n_events - injected)
        cyc = (np.arange(1, k + 1) * spacing + rng.integers(-spacing // 4, spacing // 4, k)).astype(np.int64)
        t = tb.entry_start(e) + (cyc + rng.random(k)) * tb.cycle_duration
        dg = law.draw(rng, k)
        truth = [BurstTruth(float(t[i]), e, int(cyc[i]), "cosmic", dg[i]) for i in range(k)]
        shots = render_entry(e, truth, qubits, tb, seed)
        cat = _detect_entry(cfg, template, e, shots)
        found = np.array(sorted(ev.onset_cycle for ev in cat.events), np.int64)
        for c in cyc:
            if len(found) == 0:
                continue
            j = np.argmin(np.abs(found - c))
            if abs(found[j] - c) <= spacing // 2:
                lags.append(int(found[j] - c))
        injected += k
    lags = np.asarray(lags, np.int64)
    eff = float(np.mean(np.abs(lags) <= half)) if len(lags) else float("nan")
    return eff, lags, injected


def stage_detect(ctx: Context):
    cfg = ctx.cfg
    d = cfg["detection"]
    tb = cfg.timebase()
    template = _template(cfg)
    events, cands, dyn_rows, mult = [], [], [], []
    for entry, shots in _iter_shots(ctx):
        cat = _detect_entry(cfg, template, entry, shots)
        cands.extend(cat.candidates)
        for ev in cat.events:
            dy = event_dynamics(shots.bits, ev, int(d["bin_cycles"]), int(d["pre_cycles"]), int(d["pre_gap"]),
                                int(d["post_cycles"]), float(d["participation_threshold"]),
                                cfg.qubits()[0].effective_delay, tb.cycle_duration)
            events.append(ev)
            if dy is None:
                mult.append(-1)
                continue
            mult.append(dy.multiplicity)
            for q, qd in zip(cfg.qubits(), dy.qubits):
                dyn_rows.append((ev.entry, ev.onset_cycle, q.label, qd.p_pre, qd.dgamma_init, qd.tau,
                                 int(qd.participates)))
    sep = int(np.floor(float(d["min_separation"]) / tb.cycle_duration)) + 1
    cat = EventCatalog(events, float(d["candidate_threshold"]), float(d["accept_threshold"]), sep, cands)
    fm.write_catalog(ctx.path("events.csv"), cat, ctx.meta)
    fm.write_csv(ctx.path("candidates.csv"), ["entry", "cycle", "peak"], cands, ctx.meta)
    fm.write_csv(ctx.path("dynamics.csv"), ["entry", "onset_cycle", "qubit", "p_pre", "dgamma_init", "tau",
                                            "participates"], dyn_rows, ctx.meta)
    fm.write_csv(ctx.path("multiplicity.csv"), ["entry", "onset_cycle", "multiplicity"],
                 [(e.entry, e.onset_cycle, m) for e, m in zip(events, mult)], ctx.meta)
    eff, lags, n_inj = injection_study(cfg)
    vals, cnt = np.unique(lags, return_counts=True)
    fm.write_csv(ctx.path("injection.csv"), ["lag_cycles", "count"], list(zip(vals, cnt)),
                 dict(ctx.meta, injected=n_inj, detected=len(lags), window_efficiency=eff))
    log.info("detected %d events; window efficiency %.3f from %d injected", len(events), eff, n_inj)


# --- coincide -------------------------------------------------------------


def _amplitude_windows(cfg):
    return {k: (p.v_lo, p.v_hi) for k, p in cfg.responses().items()}


def detector_rates(pulses, windows, live_time, cluster_ns=1000.0):
    """Per detector: in-window pulse rate r_d and rate r_dS of those that share a
    cluster with an in-window pulse of another detector."""
    amp_ok = np.ones(len(pulses), bool)
    for i, lab in enumerate(pulses.labels):
        sel = pulses.detector == i
        lo, hi = windows[lab]
        amp_ok[sel] = (pulses.amplitude[sel] >= lo) & (pulses.amplitude[sel] <= hi)
    p = pulses.select(amp_ok)
    cid = cluster_pulses(p.timestamp_ns, cluster_ns)
    n_det = np.zeros(int(cid.max()) + 1 if len(cid) else 0, np.int64)
    np.add.at(n_det, cid, 1)
    multi = n_det[cid] > 1
    r_d, r_ds = {}, {}
    for i, lab in enumerate(p.labels):
        sel = p.detector == i
        r_d[lab] = sel.sum() / live_time
        r_ds[lab] = (sel & multi).sum() / live_time
    return r_d, r_ds


def stage_coincide(ctx: Context):
    cfg = ctx.cfg
    tb = cfg.timebase()
    n_entries = int(fm.read_text_meta(ctx.need("truth.csv", "simulate"))["n_entries"])
    pulses = fm.read_pulses(ctx.need("pulses.npz", "simulate"))
    ref, _ = fm.read_array(ctx.need("refpulses.npz", "simulate"))
    cat = fm.read_catalog(ctx.need("events.csv", "detect"))
    syncs = build_all(ref["timestamp_ns"], tb, range(n_entries))
    tagged, tally = assign_pulses(pulses, syncs, _amplitude_windows(cfg))
    win = WindowConfig(int(cfg["coincidence"]["window_cycles"]), tb.cycle_duration)
    n_sync = sum(s.synchronized for s in syncs)
    live = n_sync * tb.entry_span
    good = {s.entry for s in syncs if s.synchronized}
    events = [e for e in cat.events if e.entry in good]
    ias = nearest_delays(events, tagged, tb.cycle_duration, per_detector=True)
    n_qs = int(np.count_nonzero(ias.coincident(win)))
    keys = np.unique(tagged.entry.astype(np.int64) * (1 << 32) + tagged.cycle)
    r_d, r_ds = detector_rates(pulses, _amplitude_windows(cfg), live, float(cfg["calibration"]["cluster_window_ns"]))
    summary = dict(n_entries=n_entries, synchronized_entries=n_sync, live_time=live, N_Q=len(events), N_QS=n_qs,
                   N_S=len(keys), window_cycles=win.cycles, window=win.seconds,
                   pulses_input=tally.input, pulses_accepted=tally.accepted,
                   pulses_outside_entry=tally.outside_entry, pulses_unsynchronized=tally.unsynchronized,
                   pulses_amplitude_rejected=tally.amplitude,
                   **{f"r_d_{k}": v for k, v in r_d.items()}, **{f"r_dS_{k}": v for k, v in r_ds.items()})
    fm.write_keyvalue(ctx.path("coincide.txt"), summary, ctx.meta)
    fm.write_csv(ctx.path("delays.csv"), ["entry", "onset_cycle", "delay_cycles"] + [f"delay_{k}" for k in ias.per_detector],
                 [(e.entry, e.onset_cycle, ias.delays[i], *[v[i] for v in ias.per_detector.values()])
                  for i, e in enumerate(events)], ctx.meta)
    r_q = rate_from_counts(len(events), live / tb.cycle_duration, tb.cycle_duration)
    r_s = rate_from_counts(len(keys), live / tb.cycle_duration, tb.cycle_duration)
    table, best = snr_vs_window(ias.delays, r_q, r_s, live, tb.cycle_duration, cfg["coincidence"]["snr_windows"])
    fm.write_csv(ctx.path("snr_window.csv"), ["window_cycles", "N_QS", "N_acc", "snr"], table.tolist(),
                 dict(ctx.meta, best_window=best))


# --- calibrate ------------------------------------------------------------


def calibration_inputs(cfg: RunConfig, table, pulses, live_time, responses=None):
    responses = responses or cfg.responses()
    labels = [k for k in cfg.detector_labels if k in pulses.labels]
    combos = [tuple(c) for c in cfg["calibration"]["combos"]]
    n_bins = int(cfg["calibration"]["n_bins"])
    v_edges = {k: amplitude_edges(responses[k], n_bins) for k in labels}
    obs = observed_spectra(pulses.labels, pulses.detector, pulses.timestamp_ns, pulses.amplitude, responses,
                           v_edges, combos, float(cfg["calibration"]["cluster_window_ns"]))
    _, mat = table.dense()
    # the energy grid must reach past every window for any plausible gain
    e_top = {k: responses[k].v_hi / responses[k].a * 1.5 for k in labels}
    model = CalibrationModel(table.labels, mat, table.tangent_area / table.total_thrown, live_time, v_edges,
                             combos, e_top)
    return model, obs


def stage_calibrate(ctx: Context):
    cfg = ctx.cfg
    tb = cfg.timebase()
    table = fm.read_deposits(ctx.need("deposits_detector.npz", "transport"))
    pulses = fm.read_pulses(ctx.need("pulses.npz", "simulate"))
    n_entries = int(fm.read_text_meta(ctx.need("truth.csv", "simulate"))["n_entries"])
    live = n_entries * tb.entry_span
    model, obs = calibration_inputs(cfg, table, pulses, live)
    pert = float(cfg["calibration"]["init_perturbation"])
    init = {k: ResponseParams(k, p.a * (1 + pert), p.b, p.v_lo, p.v_hi) for k, p in cfg.responses().items()}
    try:
        res = fit_response(model, obs, init, maxiter=int(cfg["calibration"]["maxiter"]))
    except FitFailure as exc:
        if exc.result is not None:
            fm.write_text(ctx.path("calibration.txt"), format_params_table(exc.result.params, exc.result.errors),
                          dict(ctx.meta, status="failed"))
        raise
    fm.write_text(ctx.path("calibration.txt"), format_params_table(res.params, res.errors),
                  dict(ctx.meta, status="ok", eps=res.eps, flux=res.flux, deviance=res.cost, n_bins=res.n_bins))
    fm.write_keyvalue(ctx.path("calibration_fit.txt"),
                      dict(eps=res.eps, Phi=res.flux, deviance=res.cost, n_bins=res.n_bins,
                           converged=int(res.converged), **{f"{k}_err": float(v) for k, v in res.errors.items()},
                           **{f"a_{k}": p.a for k, p in res.params.items()},
                           **{f"b_{k}": p.b for k, p in res.params.items()}), ctx.meta)


# --- report ---------------------------------------------------------------


def match_truth(events, truth, max_lag: int = 5):
    """Source tag of the truth burst nearest each event onset (same entry), or None."""
    by_entry = {}
    for b in truth:
        by_entry.setdefault(b.entry, []).append(b)
    out = []
    for e in events:
        cands = by_entry.get(e.entry, [])
        best = min(cands, key=lambda b: abs(b.cycle - e.onset_cycle), default=None)
        out.append(best.source_tag if best is not None and abs(best.cycle - e.onset_cycle) <= max_lag else None)
    return out


def stage_report(ctx: Context):
    cfg = ctx.cfg
    tb = cfg.timebase()
    summ = fm.read_keyvalue(ctx.need("coincide.txt", "coincide"))
    inj = fm.read_text_meta(ctx.need("injection.csv", "detect"))
    xs_chip = fm.read_xsections(ctx.need("xsection_chip.txt", "xsection"))
    xs_det = fm.read_xsections(ctx.need("xsection_detector.txt", "xsection")).marginalize(cfg.detector_labels)
    labels = cfg.detector_labels
    r_d = {k: summ[f"r_d_{k}"] for k in labels}
    r_ds = {k: summ[f"r_dS_{k}"] for k in labels}
    fe = estimate_flux_and_efficiency(r_d, r_ds, xs_det)
    eps_dt = float(inj["window_efficiency"])
    n_det = int(inj["detected"])
    eps_dt_err = np.sqrt(eps_dt * (1 - eps_dt) / n_det) if n_det else 0.0
    q = cfg.chip_label
    effs = dict.fromkeys(labels, fe.eps)
    cov = coverage_of(q, xs_chip, effs, eps_dt)
    cov_lo = coverage_of(q, xs_chip, dict.fromkeys(labels, max(fe.eps - fe.eps_err, 0.0)), eps_dt - eps_dt_err)
    cov_hi = coverage_of(q, xs_chip, dict.fromkeys(labels, min(fe.eps + fe.eps_err, 1.0)), eps_dt + eps_dt_err)
    cov_err = 0.5 * abs(cov_hi - cov_lo)
    T = float(summ["live_time"])
    ledger = decompose_rates(int(summ["N_Q"]), int(summ["N_QS"]), T, float(summ["window"]), cov,
                             n_s=float(summ["N_S"]), cycle=tb.cycle_duration, coverage_err=cov_err, flux=fe.Phi)
    vals = ledger.as_dict()
    vals.update(Phi_err=fe.Phi_err, eps=fe.eps, eps_err=fe.eps_err, window_efficiency=eps_dt,
                window_efficiency_err=eps_dt_err, coverage_err=cov_err, sigma_Q=xs_chip.sigma(q),
                live_time_h=T / 3600, wall_time_h=(summ["n_entries"] * tb.entry_stride) / 3600)
    for k in labels:
        vals[f"Phi_{k}"] = fe.per_detector_Phi[k]
        vals[f"eps_{k}"] = fe.per_detector_eps[k]
    # ground truth, when the run was simulated
    cat = fm.read_catalog(ctx.need("events.csv", "detect"))
    truth = fm.read_truth(ctx.path("truth.csv")) if ctx.path("truth.csv").exists() else []
    if truth:
        tags = match_truth(cat.events, truth)
        n_c = sum(t == "cosmic" for t in tags)
        n_o = sum(t == "other" for t in tags)
        vals.update(truth_Phi=cfg.phi, truth_detected_cosmic=n_c, truth_detected_other=n_o,
                    truth_unmatched=sum(t is None for t in tags),
                    truth_cosmic_fraction=n_c / (n_c + n_o) if n_c + n_o else float("nan"),
                    truth_injected_cosmic=sum(b.source_tag == "cosmic" for b in truth),
                    truth_injected_other=sum(b.source_tag == "other" for b in truth))
    if ctx.path("calibration_fit.txt").exists():
        cal = fm.read_keyvalue(ctx.path("calibration_fit.txt"))
        vals.update(calibration_eps=cal["eps"], calibration_Phi=cal["Phi"])
    fm.write_keyvalue(ctx.path("ledger.txt"), vals, ctx.meta)

    # inter-arrival histogram (observed, background, cosmic) in 200-cycle bins
    rows = fm.read_csv(ctx.need("delays.csv", "coincide"))
    delays = np.array([float(r["delay_cycles"]) for r in rows])
    c = cfg["coincidence"]
    w = int(c["histogram_bin_cycles"])
    rng_c = int(c["histogram_range_cycles"])
    edges = np.arange(-rng_c - w / 2, rng_c + w / 2 + 1, w)
    centers = 0.5 * (edges[1:] + edges[:-1])
    obs = np.histogram(delays[np.isfinite(delays)], edges)[0]
    bg = background_histogram(ledger.r_Q, ledger.r_QS_mu, ledger.r_S, w * tb.cycle_duration,
                              centers * tb.cycle_duration, T)
    mu = np.where((edges[:-1] <= 0) & (edges[1:] > 0), ledger.r_QS_mu * T, 0.0)
    fm.write_csv(ctx.path("interarrival.csv"), ["bin_center_s", "observed", "expected_background", "expected_cosmic"],
                 list(zip(centers * tb.cycle_duration, obs, bg, mu)), ctx.meta)

    # participation stacks
    mrows = fm.read_csv(ctx.need("multiplicity.csv", "detect"))
    dmap = {(int(r["entry"]), int(r["onset_cycle"])): float(r["delay_cycles"]) for r in rows}
    half = WindowConfig(int(c["window_cycles"]), tb.cycle_duration).half
    m = [int(r["multiplicity"]) for r in mrows if int(r["multiplicity"]) >= 0]
    tg = [abs(dmap.get((int(r["entry"]), int(r["onset_cycle"])), np.inf)) <= half
          for r in mrows if int(r["multiplicity"]) >= 0]
    nq = len(cfg.qubits())
    total, cosmic, other = participation_histogram(m, tg, cov, nq)
    fm.write_csv(ctx.path("participation.csv"), ["n_qubits", "total", "cosmic", "other"],
                 list(zip(range(nq + 1), total, cosmic, other)), ctx.meta)

    # event-averaged recovery constants
    drows = fm.read_csv(ctx.need("dynamics.csv", "detect"))
    rec = []
    for qp in cfg.qubits():
        taus = np.array([float(r["tau"]) for r in drows if r["qubit"] == qp.label and r["participates"] == "1"])
        taus = taus[np.isfinite(taus)]
        rec.append((qp.label, len(taus), float(np.median(taus)) if len(taus) else float("nan"),
                    float(np.mean(taus)) if len(taus) else float("nan"), qp.recovery_tau))
    fm.write_csv(ctx.path("recovery.csv"), ["qubit", "n_fits", "tau_median_s", "tau_mean_s", "tau_config_s"], rec,
                 ctx.meta)
    log.info("report: r_Q=%.4g r_QS_mu=%.4g C=%.4g fraction=%.4f Phi=%.4g", ledger.r_Q, ledger.r_QS_mu, cov,
             ledger.cosmic_fraction, fe.Phi)
    return vals


RUNNERS = dict(sample=stage_sample, transport=stage_transport, xsection=stage_xsection, simulate=stage_simulate,
               detect=stage_detect, coincide=stage_coincide, calibrate=stage_calibrate, report=stage_report)


def run_pipeline(cfg: RunConfig, stages=None, out: str | Path | None = None):
    """Run the chosen stages in dependency order."""
    out = Path(out if out is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    chosen = STAGES if not stages else [s for s in STAGES if s in set(stages)]
    unknown = set(stages or ()) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stages: {sorted(unknown)}")
    ctx = Context(cfg, out)
    with fm.atomic_open(out / "config.resolved.yaml") as fh:
        fh.write(f"# config_hash: {cfg.hash()}\n# seed: {cfg.seed}\n" + cfg.dump())
    result = None
    for s in chosen:
        log.info("stage %s", s)
        result = RUNNERS[s](ctx)
    return result
