"""On-disk formats.  Every writer goes through a temp file and an atomic rename,
and every artifact carries the config hash and seed (in a header line, in the
npz ``meta`` entry, or in a ``.meta.json`` sidecar for raw binaries)."""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
import zipfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from ..burstdetect import Event, EventCatalog
from ..fluxmc import MuonBatch
from ..geometry import CrossSectionSet, DepositionTable, combo_mask, combo_name
from ..streamsim import BurstTruth, PulseTable, ShotEntry

MUON_MAGIC = b"CQMU"
SHOT_MAGIC = b"CQSH"
VERSION = 1
_MUON_HEADER = struct.Struct("<4sIQ")  # magic, version, record count: 16 bytes
_SHOT_HEADER = struct.Struct("<4sII")  # magic, version, qubit count
_ENTRY_HEADER = struct.Struct("<IIIq")  # entry, cycles, qubits, start ns


class FormatError(ValueError):
    pass


@contextmanager
def atomic_open(path, mode="w"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def stamp(config_hash: str, seed: int, **extra) -> dict:
    return dict(config_hash=config_hash, seed=int(seed), **extra)


def _header_lines(meta: dict) -> str:
    return "".join(f"# {k}: {v}\n" for k, v in meta.items())


def write_meta(path, meta: dict):
    with atomic_open(str(path) + ".meta.json") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)


def read_meta(path) -> dict:
    p = Path(str(path) + ".meta.json")
    return json.loads(p.read_text()) if p.exists() else {}


def read_text_meta(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("# ") or ": " not in line:
                break
            k, v = line[2:].rstrip("\n").split(": ", 1)
            out[k] = v
    return out


def _save_npz(path, meta: dict, **arrays):
    """npz readable by ``np.load``; member dates are fixed so reruns are byte-identical."""
    arrays = dict(meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    with atomic_open(path, "wb") as fh, zipfile.ZipFile(fh, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, np.asanyarray(arr), allow_pickle=False)


def _load_npz(path):
    z = np.load(path, allow_pickle=False)
    return {k: z[k] for k in z.files if k != "meta"}, json.loads(str(z["meta"]))


# --- muon samples ---------------------------------------------------------


def write_muons(path, batch: MuonBatch, meta: dict):
    """16-byte header, then per muon 7 little-endian doubles: origin xyz, direction xyz, energy."""
    rec = np.empty((len(batch), 7), "<f8")
    rec[:, :3] = batch.origin
    rec[:, 3:6] = batch.direction
    rec[:, 6] = batch.energy
    with atomic_open(path, "wb") as fh:
        fh.write(_MUON_HEADER.pack(MUON_MAGIC, VERSION, len(batch)))
        fh.write(rec.tobytes())
    write_meta(path, dict(meta, tangent_side_l=batch.tangent_side_l, center=list(map(float, batch.center)),
                          first_index=batch.first_index))


def read_muons(path) -> MuonBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, ver, n = _MUON_HEADER.unpack_from(raw)
    if magic != MUON_MAGIC or ver != VERSION:
        raise FormatError(f"{path}: not a muon sample file")
    rec = np.frombuffer(raw, "<f8", count=7 * n, offset=_MUON_HEADER.size).reshape(n, 7)
    meta = read_meta(path)
    return MuonBatch(rec[:, :3].copy(), rec[:, 3:6].copy(), rec[:, 6].copy(), float(meta["tangent_side_l"]),
                     np.asarray(meta.get("center", (0, 0, 0)), float), int(meta.get("first_index", 0)))


# --- deposition tables and cross-sections ----------------------------------


def write_deposits(path, table: DepositionTable, meta: dict):
    _save_npz(path, dict(meta, labels=list(table.labels), total_thrown=table.total_thrown,
                         tangent_area=table.tangent_area, secondary_boost=table.secondary_boost),
              muon_index=table.muon_index, label_index=table.label_index, energy=table.energy)


def read_deposits(path) -> DepositionTable:
    a, m = _load_npz(path)
    return DepositionTable(tuple(m["labels"]), a["muon_index"], a["label_index"], a["energy"],
                           int(m["total_thrown"]), float(m["tangent_area"]), float(m["secondary_boost"]))


def write_xsections(path, xs: CrossSectionSet, meta: dict):
    """Two columns: exclusive combination string and sigma* (cm^2); the empty combination is '-'."""
    lines = [_header_lines(dict(meta, labels=" ".join(xs.labels), tangent_area=xs.tangent_area,
                                sample_count=xs.sample_count, secondary_boost=xs.secondary_boost))]
    lines.append("# combination  sigma_star_cm2  count\n")
    s = xs.exclusive_array()
    for m in range(len(s)):
        if xs.exclusive_counts[m] or m == 0:
            lines.append(f"{combo_name(m, xs.labels) or '-'}  {s[m]:.10e}  {int(xs.exclusive_counts[m])}\n")
    with atomic_open(path) as fh:
        fh.write("".join(lines))


def read_xsections(path) -> CrossSectionSet:
    meta = read_text_meta(path)
    labels = tuple(meta["labels"].split())
    counts = np.zeros(1 << len(labels), np.int64)
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    for row in rows:
        m = 0 if row[0] == "-" else combo_mask(row[0], labels)
        counts[m] = int(row[2])
    return CrossSectionSet(labels, counts, float(meta["tangent_area"]), int(meta["sample_count"]),
                           float(meta["secondary_boost"]))


# --- shots ----------------------------------------------------------------


class ShotWriter:
    """Streaming writer: file header, then per entry a header and packed bits [cycle][qubit]."""

    def __init__(self, path, n_qubits: int, meta: dict):
        self.path = Path(path)
        self._ctx = atomic_open(self.path, "wb")
        self._fh = self._ctx.__enter__()
        self._fh.write(_SHOT_HEADER.pack(SHOT_MAGIC, VERSION, n_qubits))
        self.meta = meta

    def write(self, e: ShotEntry):
        self._fh.write(_ENTRY_HEADER.pack(e.entry, e.n_cycles, e.n_qubits, e.start_ns))
        self._fh.write(np.packbits(e.bits.ravel()).tobytes())

    def close(self):
        self._ctx.__exit__(None, None, None)
        write_meta(self.path, self.meta)

    def __enter__(self):
        return self

    def __exit__(self, et, ev, tb):
        if et is None:
            self.close()
        else:
            self._ctx.__exit__(et, ev, tb)


def iter_shots(path):
    with open(path, "rb") as fh:
        magic, ver, _ = _SHOT_HEADER.unpack(fh.read(_SHOT_HEADER.size))
        if magic != SHOT_MAGIC or ver != VERSION:
            raise FormatError(f"{path}: not a shot file")
        while True:
            h = fh.read(_ENTRY_HEADER.size)
            if not h:
                return
            entry, nc, nq, start = _ENTRY_HEADER.unpack(h)
            nbytes = (nc * nq + 7) // 8
            bits = np.unpackbits(np.frombuffer(fh.read(nbytes), np.uint8), count=nc * nq).reshape(nc, nq)
            yield ShotEntry(entry, start, bits)


# --- pulses, truth --------------------------------------------------------


def write_pulses(path, pulses: PulseTable, meta: dict):
    _save_npz(path, dict(meta, labels=list(pulses.labels)), detector=pulses.detector,
              timestamp_ns=pulses.timestamp_ns, amplitude=pulses.amplitude)


def read_pulses(path) -> PulseTable:
    a, m = _load_npz(path)
    return PulseTable(tuple(m["labels"]), a["detector"], a["timestamp_ns"], a["amplitude"])


def write_array(path, meta: dict, **arrays):
    _save_npz(path, meta, **arrays)


def read_array(path):
    return _load_npz(path)


def write_truth(path, truth, qubit_labels, meta: dict):
    buf = io.StringIO()
    buf.write(_header_lines(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time_ns", "entry", "cycle", "source", "linked_muon"] + [f"dgamma_{q}" for q in qubit_labels])
    for b in truth:
        w.writerow([int(round(b.onset_time * 1e9)), b.entry, b.cycle, b.source_tag,
                    "" if b.linked_muon is None else b.linked_muon] + [f"{x:.17g}" for x in b.per_qubit_dgamma])
    with atomic_open(path) as fh:
        fh.write(buf.getvalue())


def read_truth(path):
    out = []
    with open(path) as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for r in rows:
            dg = np.array([float(v) for k, v in r.items() if k.startswith("dgamma_")])
            out.append(BurstTruth(int(r["time_ns"]) * 1e-9, int(r["entry"]), int(r["cycle"]), r["source"], dg,
                                  int(r["linked_muon"]) if r["linked_muon"] else None))
    return out


# --- catalogs and tables --------------------------------------------------


def write_csv(path, header, rows, meta: dict):
    buf = io.StringIO()
    buf.write(_header_lines(meta))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{x:.10g}" if isinstance(x, (float, np.floating)) else x for x in r])
    with atomic_open(path) as fh:
        fh.write(buf.getvalue())


def read_csv(path) -> list:
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def write_catalog(path, cat: EventCatalog, meta: dict):
    write_csv(path, ["entry", "onset_cycle", "time_ns", "peak"],
              [(e.entry, e.onset_cycle, e.time_ns, e.peak) for e in cat.events],
              dict(meta, candidate_thresh=cat.candidate_thresh, accept_thresh=cat.accept_thresh,
                   min_sep_cycles=cat.min_sep_cycles))


def read_catalog(path) -> EventCatalog:
    m = read_text_meta(path)
    ev = [Event(int(r["entry"]), int(r["onset_cycle"]), int(r["time_ns"]), float(r["peak"])) for r in read_csv(path)]
    return EventCatalog(ev, float(m.get("candidate_thresh", 50)), float(m.get("accept_thresh", 105)),
                        int(m.get("min_sep_cycles", 819)))


def write_keyvalue(path, values: dict, meta: dict):
    body = _header_lines(meta) + "".join(
        f"{k} = {v:.10g}\n" if isinstance(v, (float, np.floating)) else f"{k} = {v}\n" for k, v in values.items())
    with atomic_open(path) as fh:
        fh.write(body)


def read_keyvalue(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or "=" not in line:
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


def write_text(path, text: str, meta: dict):
    with atomic_open(path) as fh:
        fh.write(_header_lines(meta) + text)
