"""Reference-pulse synchronization of detector timestamps to qubit measurement cycles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..coinstat import CyclePulses
from ..streamsim import PulseTable, TimebaseConfig


@dataclass
class SyncMap:
    """Piecewise-linear timestamp -> cycle map for one entry.

    Knot j sits at cycle (j + 1) * period.  Before the first knot the first
    segment is extended back to cycle 0; nothing is mapped past the last knot.
    """

    entry: int
    knot_ns: np.ndarray
    knot_cycle: np.ndarray
    synchronized: bool = True
    reason: str = ""

    @property
    def start_ns(self) -> float:
        t0, t1 = self.knot_ns[:2].astype(float)
        c0, c1 = self.knot_cycle[:2].astype(float)
        return t0 - c0 * (t1 - t0) / (c1 - c0)

    @property
    def end_ns(self) -> int:
        return int(self.knot_ns[-1])

    def cycle_of(self, t_ns) -> np.ndarray:
        """Continuous cycle coordinate of timestamps."""
        t = np.asarray(t_ns, dtype=np.int64)
        k = self.knot_ns
        i = np.clip(np.searchsorted(k, t, side="right") - 1, 0, len(k) - 2)
        # integer offsets first so large absolute timestamps keep full precision
        frac = (t - k[i]).astype(float) / (k[i + 1] - k[i]).astype(float)
        return self.knot_cycle[i] + frac * (self.knot_cycle[i + 1] - self.knot_cycle[i])


def build_sync(ref_ns, tb: TimebaseConfig, entry: int = 0) -> SyncMap:
    ref = np.asarray(ref_ns, dtype=np.int64)
    n_expected = tb.cycles_per_entry // tb.ref_pulse_period
    cycles = (np.arange(len(ref)) + 1) * tb.ref_pulse_period
    if len(ref) != n_expected:
        return SyncMap(entry, ref, cycles, False, f"{len(ref)} reference pulses, expected {n_expected}")
    if np.any(np.diff(ref) <= 0):
        return SyncMap(entry, ref, cycles, False, "reference pulses not strictly increasing")
    return SyncMap(entry, ref, cycles)


def group_reference_pulses(ref_ns, tb: TimebaseConfig) -> list:
    """Split a run's reference pulses into entries at gaps much longer than the period."""
    ref = np.sort(np.asarray(ref_ns, dtype=np.int64))
    if len(ref) == 0:
        return []
    period_ns = tb.ref_pulse_period * tb.cycle_duration * 1e9
    cut = np.nonzero(np.diff(ref) > 10 * period_ns)[0] + 1
    return np.split(ref, cut)


def build_all(ref_ns, tb: TimebaseConfig, entries=None) -> list:
    """SyncMaps for each group, matched to entries by order."""
    groups = group_reference_pulses(ref_ns, tb)
    entries = list(range(len(groups))) if entries is None else list(entries)
    if len(entries) != len(groups):
        raise ValueError(f"{len(groups)} reference-pulse groups for {len(entries)} entries")
    return [build_sync(g, tb, e) for g, e in zip(groups, entries)]


@dataclass
class AssignTally:
    input: int = 0
    accepted: int = 0
    outside_entry: int = 0
    unsynchronized: int = 0
    amplitude: int = 0
    per_detector: dict = field(default_factory=dict)

    def conserved(self) -> bool:
        return self.input == self.accepted + self.outside_entry + self.unsynchronized + self.amplitude


def assign_pulses(pulses: PulseTable, syncs: list, windows: dict | None = None):
    """Tag each pulse with (entry, cycle); drop pulses outside entries, in
    unsynchronized entries, or outside the amplitude window of their detector."""
    tally = AssignTally(input=len(pulses))
    t = pulses.timestamp_ns
    n = len(t)
    entry = np.full(n, -1, np.int64)
    cycle = np.full(n, -1, np.int64)
    unsync = np.zeros(n, bool)
    order = sorted(syncs, key=lambda s: s.knot_ns[0])
    for s in order:
        lo = np.searchsorted(t, int(np.ceil(s.start_ns)), side="left") if s.synchronized else \
            np.searchsorted(t, s.knot_ns[0] - 1_000_000_000, side="left")
        hi = np.searchsorted(t, s.end_ns, side="left")  # the last knot closes the entry
        if hi <= lo:
            continue
        if not s.synchronized:
            unsync[lo:hi] = True
            continue
        c = np.floor(s.cycle_of(t[lo:hi])).astype(np.int64)
        c = np.clip(c, 0, int(s.knot_cycle[-1]) - 1)
        entry[lo:hi] = s.entry
        cycle[lo:hi] = c
    outside = (entry < 0) & ~unsync
    tally.outside_entry = int(outside.sum())
    tally.unsynchronized = int(unsync.sum())
    ok = entry >= 0
    if windows:
        lo_v = np.array([windows[lab][0] if lab in windows else -np.inf for lab in pulses.labels])
        hi_v = np.array([windows[lab][1] if lab in windows else np.inf for lab in pulses.labels])
        amp_ok = (pulses.amplitude >= lo_v[pulses.detector]) & (pulses.amplitude <= hi_v[pulses.detector])
        tally.amplitude = int((ok & ~amp_ok).sum())
        ok &= amp_ok
    tally.accepted = int(ok.sum())
    for i, lab in enumerate(pulses.labels):
        tally.per_detector[lab] = int((ok & (pulses.detector == i)).sum())
    return CyclePulses(pulses.labels, entry[ok], cycle[ok], pulses.detector[ok]), tally
