"""Outcome recording, loss classification and the delimited-text result products.

Output schemas (one CSV per product, header row first, stable column order):

    pdr.csv        bin_start_m, bin_end_m, delivered, total, pdr
    errors.csv     result, count, fraction_of_pairs, fraction_of_losses
    cbr.csv        subframe, vehicle, cbr
    mcs_usage.csv  subframe, vehicles, frac_mcs7, frac_mcs11
    rssi.csv       subframe, subchannel, mean_rssi_dbm
    manifest.json  config echo, seed, package version, status, counters

Aggregates over several runs use the same file names with these columns:

    pdr.csv        bin_start_m, bin_end_m, delivered, total, pdr   (means over runs)
    errors.csv     result, count, fraction_of_pairs, fraction_of_losses
    cbr.csv        subframe, mean_cbr
    mcs_usage.csv  subframe, frac_mcs7, frac_mcs11
    rssi.csv       subframe, subchannel, mean_rssi_dbm
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grid import Allocation

CAUSES = ("half_duplex", "undecoded_sci", "sensing", "interference")
RESULTS = ("delivered",) + CAUSES
DELIVERED, HALF_DUPLEX, UNDECODED_SCI, SENSING, INTERFERENCE = range(5)


@dataclass(frozen=True)
class TxOutcome:
    tx_id: int
    origin: int
    subframe: int
    allocation: Allocation
    mcs: int
    receiver: int
    distance: float
    result: str


@dataclass(frozen=True)
class RxContext:
    """What a receiver knows about one transmission it did not deliver."""
    receiver_transmitting: bool
    sci_decoded: bool
    tb_snr: float
    tb_threshold: float
    rx_power: float = math.inf
    rx_sensitivity: float = -math.inf


def classify_loss(ctx: RxContext) -> str:
    """Cause of a lost (tx, receiver) pair, first match wins."""
    if ctx.receiver_transmitting:
        return "half_duplex"
    if not ctx.sci_decoded:
        return "undecoded_sci"
    if ctx.tb_snr < ctx.tb_threshold or ctx.rx_power < ctx.rx_sensitivity:
        return "sensing"
    return "interference"


def classify_codes(receiver_tx: np.ndarray, sci_ok: np.ndarray, tb_ok: np.ndarray,
                   tb_snr: np.ndarray, tb_threshold, rx_power: np.ndarray,
                   rx_sensitivity: float) -> np.ndarray:
    """Array form of delivery + `classify_loss`, returning RESULTS indices."""
    codes = np.full(np.broadcast(receiver_tx, sci_ok).shape, INTERFERENCE, dtype=np.int8)
    power_limited = (tb_snr < tb_threshold) | (rx_power < rx_sensitivity)
    codes[power_limited] = SENSING
    codes[sci_ok & tb_ok] = DELIVERED
    codes[~sci_ok] = UNDECODED_SCI
    codes[np.broadcast_to(receiver_tx, codes.shape)] = HALF_DUPLEX
    return codes


def _n_bins(max_range: float, bin_width: float) -> int:
    return max(1, math.ceil(max_range / bin_width))


def _bin_of(distance, max_range: float, bin_width: float):
    return np.minimum((np.asarray(distance) // bin_width).astype(np.int64),
                      _n_bins(max_range, bin_width) - 1)


def pdr_by_distance(outcomes: Iterable[TxOutcome], bin_width: float = 25.0,
                    max_range: float = 500.0) -> list[tuple[float, float, int, int, float]]:
    """(bin_start, bin_end, delivered, total, pdr) per populated bin."""
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    nb = _n_bins(max_range, bin_width)
    delivered = np.zeros(nb, dtype=np.int64)
    total = np.zeros(nb, dtype=np.int64)
    for o in outcomes:
        if o.distance > max_range:
            continue
        b = int(_bin_of(o.distance, max_range, bin_width))
        total[b] += 1
        delivered[b] += o.result == "delivered"
    return _pdr_rows(delivered, total, bin_width, max_range)


def _pdr_rows(delivered, total, bin_width, max_range):
    rows = []
    for b in range(len(total)):
        if total[b] == 0:
            continue
        rows.append((b * bin_width, min((b + 1) * bin_width, max_range), delivered[b], total[b],
                     delivered[b] / total[b]))
    return rows


def mcs_usage(epoch_samples: Sequence[Sequence[int]]) -> list[float]:
    """Fraction of vehicles on MCS 11 in each epoch."""
    out = []
    for sample in epoch_samples:
        s = np.asarray(sample)
        out.append(float(np.mean(s == 11)) if s.size else 0.0)
    return out


@dataclass
class RunMetrics:
    bin_width: float = 25.0
    max_range: float = 500.0
    error_range: float = 500.0
    num_subchannels: int = 5
    delivered: np.ndarray = None
    total: np.ndarray = None
    result_counts: dict = field(default_factory=lambda: {r: 0 for r in RESULTS})
    cbr: list = field(default_factory=list)          # (subframe, per-vehicle array)
    mcs: list = field(default_factory=list)          # (subframe, vehicles, on MCS 11)
    rssi: list = field(default_factory=list)         # (subframe, per-subchannel mean dBm)
    counters: dict = field(default_factory=dict)
    outcomes: list | None = None

    def __post_init__(self):
        nb = _n_bins(self.max_range, self.bin_width)
        if self.delivered is None:
            self.delivered = np.zeros(nb, dtype=np.int64)
        if self.total is None:
            self.total = np.zeros(nb, dtype=np.int64)

    def record(self, distance: np.ndarray, codes: np.ndarray) -> None:
        distance = np.asarray(distance, dtype=float)
        codes = np.asarray(codes)
        in_range = distance <= self.max_range
        b = _bin_of(distance[in_range], self.max_range, self.bin_width)
        np.add.at(self.total, b, 1)
        np.add.at(self.delivered, b, codes[in_range] == DELIVERED)
        near = distance <= self.error_range
        counts = np.bincount(codes[near].astype(np.int64), minlength=len(RESULTS))
        for i, r in enumerate(RESULTS):
            self.result_counts[r] += int(counts[i])

    # derived products ------------------------------------------------------
    def pdr_table(self):
        return _pdr_rows(self.delivered, self.total, self.bin_width, self.max_range)

    def error_table(self):
        pairs = sum(self.result_counts.values())
        losses = pairs - self.result_counts["delivered"]
        rows = []
        for r in RESULTS:
            c = self.result_counts[r]
            fp = c / pairs if pairs else 0.0
            fl = math.nan if r == "delivered" else (c / losses if losses else 0.0)
            rows.append((r, c, fp, fl))
        return rows

    def error_fraction(self, cause: str, of: str = "pairs") -> float:
        for r, _, fp, fl in self.error_table():
            if r == cause:
                return fp if of == "pairs" else fl
        raise KeyError(cause)

    def mean_cbr(self) -> float:
        vals = [v for _, arr in self.cbr for v in arr]
        return float(np.mean(vals)) if vals else math.nan

    def mcs11_fraction(self) -> float:
        veh = sum(n for _, n, _ in self.mcs)
        return sum(k for _, _, k in self.mcs) / veh if veh else math.nan

    def mean_rssi(self) -> float:
        vals = [np.asarray(a) for _, a in self.rssi]
        return float(np.nanmean(np.vstack(vals))) if vals else math.nan


# export / import -------------------------------------------------------------

def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([r if isinstance(r, str) else _fmt(r) for r in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def export(m: RunMetrics, path: str | Path, manifest: dict | None = None) -> list[Path]:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    files = []
    f = out / "pdr.csv"
    _write_csv(f, ["bin_start_m", "bin_end_m", "delivered", "total", "pdr"], m.pdr_table())
    files.append(f)
    f = out / "errors.csv"
    _write_csv(f, ["result", "count", "fraction_of_pairs", "fraction_of_losses"], m.error_table())
    files.append(f)
    f = out / "cbr.csv"
    _write_csv(f, ["subframe", "vehicle", "cbr"],
               ((sf, v, val) for sf, arr in m.cbr for v, val in enumerate(arr)))
    files.append(f)
    f = out / "mcs_usage.csv"
    _write_csv(f, ["subframe", "vehicles", "frac_mcs7", "frac_mcs11"],
               ((sf, n, (n - k) / n if n else 0.0, k / n if n else 0.0) for sf, n, k in m.mcs))
    files.append(f)
    f = out / "rssi.csv"
    _write_csv(f, ["subframe", "subchannel", "mean_rssi_dbm"],
               ((sf, j, val) for sf, arr in m.rssi for j, val in enumerate(arr)))
    files.append(f)
    man = dict(manifest or {})
    man.setdefault("bin_width", m.bin_width)
    man.setdefault("max_range", m.max_range)
    man.setdefault("error_range", m.error_range)
    man.setdefault("num_subchannels", m.num_subchannels)
    man.setdefault("counters", m.counters)
    f = out / "manifest.json"
    try:
        f.write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {f}: {exc}") from exc
    files.append(f)
    return files


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def load_run(path: str | Path) -> RunMetrics:
    """Re-parse a directory written by `export` for a single run."""
    p = Path(path)
    man = json.loads((p / "manifest.json").read_text())
    m = RunMetrics(bin_width=man["bin_width"], max_range=man["max_range"],
                   error_range=man["error_range"], num_subchannels=man["num_subchannels"])
    m.counters = man.get("counters", {})
    for row in _read_csv(p / "pdr.csv"):
        b = int(_bin_of(float(row["bin_start_m"]), m.max_range, m.bin_width))
        m.delivered[b] = int(row["delivered"])
        m.total[b] = int(row["total"])
    for row in _read_csv(p / "errors.csv"):
        m.result_counts[row["result"]] = int(row["count"])
    by_sf: dict[int, list[float]] = {}
    for row in _read_csv(p / "cbr.csv"):
        by_sf.setdefault(int(row["subframe"]), []).append(float(row["cbr"]))
    m.cbr = [(sf, np.array(v)) for sf, v in by_sf.items()]
    for row in _read_csv(p / "mcs_usage.csv"):
        n = int(row["vehicles"])
        m.mcs.append((int(row["subframe"]), n, round(float(row["frac_mcs11"]) * n)))
    by_sf = {}
    for row in _read_csv(p / "rssi.csv"):
        by_sf.setdefault(int(row["subframe"]), []).append(float(row["mean_rssi_dbm"]))
    m.rssi = [(sf, np.array(v)) for sf, v in by_sf.items()]
    return m


def export_aggregate(runs: Sequence[RunMetrics], path: str | Path,
                     manifest: dict | None = None) -> list[Path]:
    """Mean-over-runs products. Bins/epochs missing from a run are skipped for that run."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    n = len(runs)

    pdr_rows = {}
    for m in runs:
        for start, end, d, t, r in m.pdr_table():
            pdr_rows.setdefault((start, end), []).append((d, t, r))
    f = out / "pdr.csv"
    _write_csv(f, ["bin_start_m", "bin_end_m", "delivered", "total", "pdr"],
               ((s, e, float(np.mean([x[0] for x in v])), float(np.mean([x[1] for x in v])),
                 float(np.mean([x[2] for x in v]))) for (s, e), v in sorted(pdr_rows.items())))
    files.append(f)

    f = out / "errors.csv"
    tables = [m.error_table() for m in runs]
    rows = []
    for i, r in enumerate(RESULTS):
        rows.append((r, float(np.mean([t[i][1] for t in tables])) if n else 0.0,
                     float(np.mean([t[i][2] for t in tables])) if n else 0.0,
                     float(np.mean([t[i][3] for t in tables])) if n else math.nan))
    _write_csv(f, ["result", "count", "fraction_of_pairs", "fraction_of_losses"], rows)
    files.append(f)

    def by_epoch(items):
        acc = {}
        for sf, val in items:
            acc.setdefault(sf, []).append(val)
        return sorted(acc.items())

    f = out / "cbr.csv"
    _write_csv(f, ["subframe", "mean_cbr"],
               ((sf, float(np.mean(v))) for sf, v in
                by_epoch((sf, float(np.mean(a)) if len(a) else 0.0) for m in runs for sf, a in m.cbr)))
    files.append(f)

    f = out / "mcs_usage.csv"
    fr = by_epoch((sf, k / nv if nv else 0.0) for m in runs for sf, nv, k in m.mcs)
    _write_csv(f, ["subframe", "frac_mcs7", "frac_mcs11"],
               ((sf, 1.0 - float(np.mean(v)), float(np.mean(v))) for sf, v in fr))
    files.append(f)

    f = out / "rssi.csv"
    rs = by_epoch((sf, np.asarray(a)) for m in runs for sf, a in m.rssi)
    _write_csv(f, ["subframe", "subchannel", "mean_rssi_dbm"],
               ((sf, j, float(val)) for sf, v in rs for j, val in enumerate(np.mean(np.vstack(v), axis=0))))
    files.append(f)

    f = out / "manifest.json"
    f.write_text(json.dumps(dict(manifest or {}, runs=n), indent=2, sort_keys=True) + "\n")
    files.append(f)
    return files
