"""Time-tag streams: the SNTT file format and the histogram analyses.

Binary layout (all little-endian)::

    offset 0   4 bytes   magic b"SNTT"
    offset 4   uint16    format version (1)
    offset 6   uint16    channel count
    offset 8   uint32    metadata length L
    offset 12  L bytes   UTF-8 JSON metadata
    then       12-byte records: uint16 channel, uint16 reserved (0), uint64 timestamp_ps

Timestamps are integer picoseconds and must be non-decreasing.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO, Iterable, Mapping

import numpy as np

from .pmatrix import ClickStatistics

__all__ = [
    "TagFormatError",
    "TimeTagStream",
    "write_tags",
    "read_tags",
    "dumps_tags",
    "loads_tags",
    "write_tags_csv",
    "read_tags_csv",
    "window_clicks",
    "click_statistics",
    "time_profile_histogram",
    "crosstalk_histogram",
    "estimate_crosstalk_probability",
    "total_array_crosstalk",
    "interarrival_efficiency_curve",
    "recovery_curve_from_tags",
    "Histogram",
    "CrosstalkEstimate",
    "CrosstalkTotal",
    "RecoveryEstimate",
]

MAGIC = b"SNTT"
VERSION = 1
HEADER = struct.Struct("<4sHH")
META_LEN = struct.Struct("<I")
RECORD = np.dtype([("channel", "<u2"), ("reserved", "<u2"), ("timestamp", "<u8")])


class TagFormatError(ValueError):
    """Malformed tag file.  ``offset`` is the byte offset of the problem and
    ``record`` the record index when the problem is inside the record area."""

    def __init__(self, message: str, offset: int, record: int | None = None):
        self.offset = offset
        self.record = record
        where = f"offset {offset}" + ("" if record is None else f", record {record}")
        super().__init__(f"{message} (at {where})")


@dataclass(eq=False)
class TimeTagStream:
    channels: np.ndarray
    timestamps: np.ndarray
    channel_count: int
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=np.uint16)
        self.timestamps = np.ascontiguousarray(self.timestamps, dtype=np.uint64)
        if self.channels.shape != self.timestamps.shape:
            raise ValueError("channels and timestamps must have the same length")

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TimeTagStream):
            return NotImplemented
        return (
            self.channel_count == other.channel_count
            and self.metadata == other.metadata
            and np.array_equal(self.channels, other.channels)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    @classmethod
    def empty(cls, channel_count: int, **metadata: Any) -> "TimeTagStream":
        return cls(np.zeros(0, np.uint16), np.zeros(0, np.uint64), channel_count, dict(metadata))

    def check(self) -> None:
        if self.timestamps.size > 1:
            bad = np.flatnonzero(np.diff(self.timestamps.astype(np.int64)) < 0)
            if bad.size:
                raise ValueError(f"timestamps decrease at record {int(bad[0]) + 1}")
        if self.channels.size and int(self.channels.max()) >= self.channel_count:
            raise ValueError("channel index exceeds channel count")

    def select(self, channel: int | None) -> np.ndarray:
        """Timestamps as int64, optionally restricted to one channel."""
        ts = self.timestamps.astype(np.int64)
        if channel is None:
            return ts
        return ts[self.channels == channel]

    @property
    def trigger_period(self) -> int | None:
        p = self.metadata.get("trigger_period_ps")
        return None if p is None else int(p)


# --- binary format ------------------------------------------------------


def _meta_bytes(meta: Mapping[str, Any]) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def write_tags(stream: TimeTagStream, sink: str | Path | BinaryIO) -> None:
    stream.check()
    if isinstance(sink, (str, Path)):
        with open(sink, "wb") as fh:
            write_tags(stream, fh)
        return
    meta = _meta_bytes(stream.metadata)
    sink.write(HEADER.pack(MAGIC, VERSION, stream.channel_count))
    sink.write(META_LEN.pack(len(meta)))
    sink.write(meta)
    rec = np.zeros(len(stream), dtype=RECORD)
    rec["channel"] = stream.channels
    rec["timestamp"] = stream.timestamps
    sink.write(rec.tobytes())


def dumps_tags(stream: TimeTagStream) -> bytes:
    buf = io.BytesIO()
    write_tags(stream, buf)
    return buf.getvalue()


def loads_tags(data: bytes) -> TimeTagStream:
    if len(data) < HEADER.size:
        raise TagFormatError("truncated header", len(data))
    magic, version, nch = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TagFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise TagFormatError(f"unsupported format version {version}", 4)
    if len(data) < HEADER.size + META_LEN.size:
        raise TagFormatError("truncated metadata length", len(data))
    (mlen,) = META_LEN.unpack_from(data, HEADER.size)
    start = HEADER.size + META_LEN.size
    if len(data) < start + mlen:
        raise TagFormatError("truncated metadata", len(data))
    try:
        meta = json.loads(data[start : start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise TagFormatError(f"metadata is not valid JSON: {exc}", start) from None
    if not isinstance(meta, dict):
        raise TagFormatError("metadata must be a JSON object", start)
    body = start + mlen
    nbytes = len(data) - body
    nrec, extra = divmod(nbytes, RECORD.itemsize)
    if extra:
        raise TagFormatError("truncated record", body + nrec * RECORD.itemsize, nrec)
    rec = np.frombuffer(data, dtype=RECORD, count=nrec, offset=body)
    if nrec:
        bad = np.flatnonzero(rec["channel"] >= nch)
        if bad.size:
            i = int(bad[0])
            raise TagFormatError(
                f"channel {int(rec['channel'][i])} >= channel count {nch}",
                body + i * RECORD.itemsize,
                i,
            )
        bad = np.flatnonzero(rec["timestamp"][1:] < rec["timestamp"][:-1])
        if bad.size:
            i = int(bad[0]) + 1
            raise TagFormatError("non-monotone timestamp", body + i * RECORD.itemsize, i)
        bad = np.flatnonzero(rec["reserved"] != 0)
        if bad.size:
            i = int(bad[0])
            raise TagFormatError("reserved field not zero", body + i * RECORD.itemsize + 2, i)
    return TimeTagStream(rec["channel"].copy(), rec["timestamp"].copy(), nch, meta)


def read_tags(source: str | Path | BinaryIO) -> TimeTagStream:
    if isinstance(source, (str, Path)):
        return loads_tags(Path(source).read_bytes())
    return loads_tags(source.read())


def write_tags_csv(stream: TimeTagStream, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("channel,timestamp_ps\n")
        for c, t in zip(stream.channels.tolist(), stream.timestamps.tolist()):
            fh.write(f"{c},{t}\n")


def read_tags_csv(path: str | Path, channel_count: int | None = None) -> TimeTagStream:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    if rows.size == 0:
        return TimeTagStream.empty(channel_count or 1)
    ch, ts = rows[:, 0], rows[:, 1]
    if np.any(ts < 0) or np.any(ch < 0):
        raise ValueError("negative channel or timestamp in CSV")
    nch = channel_count if channel_count is not None else int(ch.max()) + 1
    stream = TimeTagStream(ch, ts, nch)
    stream.check()
    return stream


def load_stream(path: str | Path) -> TimeTagStream:
    if str(path).endswith(".csv"):
        return read_tags_csv(path)
    return read_tags(path)


def save_stream(stream: TimeTagStream, path: str | Path) -> None:
    if str(path).endswith(".csv"):
        write_tags_csv(stream, path)
    else:
        write_tags(stream, path)


# --- per-pulse counting -------------------------------------------------


def window_clicks(
    stream: TimeTagStream,
    period: int,
    offset: int,
    width: int,
    n_pulses: int | None = None,
    distinct_channels: bool = False,
) -> np.ndarray:
    """Click count per pulse window ``[k*period + offset, k*period + offset + width)``.

    All tags in a window count, including repeat clicks of one channel
    (dynamic photon-number resolution).  With ``distinct_channels`` each
    channel counts at most once per window.  ``n_pulses`` defaults to the
    ``pulse_count`` metadata entry, else to the last occupied window.
    """
    period, offset, width = int(period), int(offset), int(width)
    if period <= 0:
        raise ValueError("trigger period must be positive")
    if width <= 0 or width > period:
        raise ValueError(f"window width {width} ps overlaps neighbouring windows (period {period} ps)")
    ts = stream.timestamps.astype(np.int64) - offset
    keep = ts >= 0
    k = ts[keep] // period
    inside = ts[keep] - k * period < width
    k = k[inside]
    if n_pulses is None:
        n_pulses = stream.metadata.get("pulse_count")
    if n_pulses is None:
        n_pulses = int(k.max()) + 1 if k.size else 0
    in_range = k < n_pulses
    k = k[in_range]
    if distinct_channels:
        ch = stream.channels[keep][inside][in_range].astype(np.int64)
        k = np.unique(k * (stream.channel_count + 1) + ch) // (stream.channel_count + 1)
    return np.bincount(k, minlength=n_pulses).astype(np.int64)


def click_statistics(counts: Iterable[int], n_max: int | None = None) -> ClickStatistics:
    """Normalized click-number histogram with binomial standard errors per bin.

    Counts above ``n_max`` are folded into the last bin.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size < 1:
        raise ValueError("need at least one pulse")
    if n_max is not None:
        counts = np.minimum(counts, n_max)
    hist = np.bincount(counts, minlength=0 if n_max is None else n_max + 1)
    trials = int(counts.size)
    q = hist / trials
    return ClickStatistics(
        probabilities=q, counts=hist, trials=trials, stderr=np.sqrt(q * (1 - q) / trials)
    )


# --- histograms ---------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def fwhm(self) -> float:
        """Full width at half maximum of the main peak, interpolating each
        half-maximum crossing linearly between bin centres."""
        c = np.asarray(self.counts, dtype=float)
        if c.size == 0 or c.max() <= 0:
            raise ValueError("empty histogram")
        x = self.centers
        peak = int(np.argmax(c))
        half = 0.5 * c[peak]
        below = np.flatnonzero(c[:peak] < half)
        if below.size == 0:
            raise ValueError("peak does not fall to half maximum on the left")
        i = int(below[-1])
        left = x[i] + (half - c[i]) * (x[i + 1] - x[i]) / (c[i + 1] - c[i])
        above = np.flatnonzero(c[peak:] < half)
        if above.size == 0:
            raise ValueError("peak does not fall to half maximum on the right")
        j = peak + int(above[0])
        right = x[j - 1] + (half - c[j - 1]) * (x[j] - x[j - 1]) / (c[j] - c[j - 1])
        return float(right - left)

    def to_csv(self) -> str:
        lines = ["left_ps,right_ps,count"]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{lo:g},{hi:g},{int(c)}")
        return "\n".join(lines) + "\n"


def time_profile_histogram(
    stream: TimeTagStream,
    period: int,
    bin_width: int,
    channel: int | None = None,
    offset: int = 0,
) -> Histogram:
    """Histogram of ``(t - offset) mod period`` in bins of ``bin_width`` ps."""
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    if period <= 0:
        raise ValueError("trigger period must be positive")
    nbins = math.ceil(period / bin_width)
    phase = np.mod(stream.select(channel) - int(offset), int(period))
    counts = np.bincount(phase // int(bin_width), minlength=nbins)
    edges = np.arange(nbins + 1, dtype=float) * bin_width
    return Histogram(edges=edges, counts=counts)


def crosstalk_histogram(
    stream: TimeTagStream,
    primary: int,
    secondary: int,
    max_lag: int,
    bin_width: int,
) -> tuple[Histogram, int]:
    """Lag histogram of each secondary tag relative to the nearest primary tag
    at or before it, for lags in ``[0, max_lag)``.

    Returns the histogram and the total number of primary tags.
    """
    if primary == secondary:
        raise ValueError("primary and secondary channels must differ")
    if bin_width <= 0 or max_lag <= 0:
        raise ValueError("bin width and max lag must be positive")
    tp = stream.select(primary)
    ts = stream.select(secondary)
    nbins = math.ceil(max_lag / bin_width)
    edges = np.arange(nbins + 1, dtype=float) * bin_width
    if tp.size == 0:
        return Histogram(edges, np.zeros(nbins, np.int64)), 0
    idx = np.searchsorted(tp, ts, side="right") - 1
    ok = idx >= 0
    lag = ts[ok] - tp[idx[ok]]
    lag = lag[lag < max_lag]
    counts = np.bincount(lag // bin_width, minlength=nbins)[:nbins]
    return Histogram(edges, counts), int(tp.size)


@dataclass(frozen=True)
class CrosstalkEstimate:
    probability: float
    stderr: float
    signal_counts: float
    background_per_bin: float
    primary_counts: int


def estimate_crosstalk_probability(
    hist: Histogram,
    primary_counts: int,
    lag_range: tuple[float, float] = (1000.0, 5000.0),
    background_range: tuple[float, float] | None = None,
) -> CrosstalkEstimate:
    """Crosstalk probability from a lag histogram.

    Counts in bins lying inside ``lag_range`` (ps), minus the mean per-bin
    level of the background bins, divided by the number of primary tags.
    Background bins default to those entirely after ``lag_range``; the
    prompt region before it is excluded because it holds true coincidences
    when both pixels see the same pulse.
    """
    if primary_counts <= 0:
        raise ValueError("zero primary counts")
    lo, hi = lag_range
    left, right = hist.edges[:-1], hist.edges[1:]
    sig = (left >= lo) & (right <= hi)
    if background_range is None:
        bkg = left >= hi
    else:
        bkg = (left >= background_range[0]) & (right <= background_range[1]) & ~sig
    level = float(hist.counts[bkg].mean()) if np.any(bkg) else 0.0
    raw = float(hist.counts[sig].sum())
    signal = raw - level * int(sig.sum())
    p = signal / primary_counts
    # Binomial on the signal plus the Poisson noise of the subtracted background.
    nb = int(bkg.sum())
    var_bkg = (level * int(sig.sum()) ** 2 / nb) if nb else 0.0
    var = max(p * (1 - p), 0.0) * primary_counts + var_bkg
    return CrosstalkEstimate(
        probability=p,
        stderr=math.sqrt(var) / primary_counts,
        signal_counts=signal,
        background_per_bin=level,
        primary_counts=int(primary_counts),
    )


@dataclass(frozen=True)
class CrosstalkTotal:
    ordered: float
    unordered: float
    per_detection: float


def total_array_crosstalk(
    pairwise: Mapping[tuple[int, int], float],
    adjacency: Iterable[tuple[int, int]],
    pixel_count: int | None = None,
) -> CrosstalkTotal:
    """Aggregate pair probabilities over the array.

    ``ordered`` sums both directions of every adjacent pair (first-order
    probability that a click somewhere spawns a crosstalk click, summed over
    source pixels); ``unordered`` averages the two directions of each pair
    before summing; ``per_detection`` divides ``ordered`` by the pixel count.
    """
    adjacency = [tuple(p) for p in adjacency]
    total = 0.0
    for i, j in adjacency:
        for pair in ((i, j), (j, i)):
            if pair not in pairwise:
                raise KeyError(f"missing crosstalk estimate for pair {pair}")
            total += float(pairwise[pair])
    if pixel_count is None:
        pixel_count = 1 + max((max(p) for p in adjacency), default=0)
    return CrosstalkTotal(ordered=total, unordered=total / 2, per_detection=total / pixel_count)


# --- recovery -----------------------------------------------------------


@dataclass(frozen=True)
class RecoveryEstimate:
    """Binned efficiency versus time since the previous click on the same pixel.

    ``efficiency`` is absolute (truth method) or relative (hazard method);
    ``normalized`` is divided by the plateau.  Times are in ns.
    """

    centers: np.ndarray
    efficiency: np.ndarray
    normalized: np.ndarray
    counts: np.ndarray
    plateau: float
    rt90: float
    bin_width: float
    dropped: tuple[int, ...] = ()

    def to_csv(self) -> str:
        lines = ["dt_ns,efficiency,normalized,count"]
        for c, e, n, k in zip(self.centers, self.efficiency, self.normalized, self.counts):
            lines.append(f"{c:g},{e:.6g},{n:.6g},{int(k)}")
        return "\n".join(lines) + "\n"


def _finish_recovery(centers, eff, counts, bin_width, min_count, plateau_from) -> RecoveryEstimate:
    good = counts >= min_count
    dropped = tuple(int(i) for i in np.flatnonzero(~good))
    plateau_mask = good & (centers >= plateau_from)
    if not np.any(plateau_mask):
        raise ValueError("no populated bins in the plateau region")
    plateau = float(np.average(eff[plateau_mask], weights=counts[plateau_mask]))
    if plateau <= 0:
        raise ValueError("plateau efficiency is zero; is this a CW run?")
    norm = eff / plateau
    rt90 = math.nan
    idx = np.flatnonzero(good & (norm >= 0.9))
    if idx.size:
        i = int(idx[0])
        prev = np.flatnonzero(good[:i])
        if prev.size:
            j = int(prev[-1])
            x0, x1, y0, y1 = centers[j], centers[i], norm[j], norm[i]
            rt90 = float(x0 + (0.9 - y0) * (x1 - x0) / (y1 - y0))
        else:
            rt90 = float(centers[i])
    return RecoveryEstimate(
        centers=centers[good],
        efficiency=eff[good],
        normalized=norm[good],
        counts=counts[good],
        plateau=plateau,
        rt90=rt90,
        bin_width=bin_width,
        dropped=dropped,
    )


def interarrival_efficiency_curve(
    result,
    bin_width: float = 0.25,
    max_lag: float = 30.0,
    min_count: int = 100,
    plateau_from: float | None = None,
) -> RecoveryEstimate:
    """Detection probability of photons binned by the time since the last click
    on their pixel, from a simulation run that kept its ground truth.

    RT90 is where the normalized curve first reaches 0.9, interpolated
    between that bin and the previous populated one.
    """
    truth = result.truth
    if truth is None:
        raise ValueError("simulation result carries no ground truth; rerun with keep_truth=True")
    photon = truth.kind == 0
    dt = truth.since_last[photon] / 1000.0
    det = truth.detected[photon]
    finite = np.isfinite(dt) & (dt < max_lag)
    nbins = math.ceil(max_lag / bin_width)
    b = (dt[finite] / bin_width).astype(np.int64)
    counts = np.bincount(b, minlength=nbins)[:nbins]
    hits = np.bincount(b, weights=det[finite], minlength=nbins)[:nbins]
    centers = (np.arange(nbins) + 0.5) * bin_width
    eff = np.divide(hits, counts, out=np.zeros(nbins), where=counts > 0)
    if plateau_from is None:
        plateau_from = 0.75 * max_lag
    return _finish_recovery(centers, eff, counts, bin_width, min_count, plateau_from)


def recovery_curve_from_tags(
    stream: TimeTagStream,
    channels: Iterable[int] | None = None,
    bin_width: float = 0.25,
    max_lag: float = 30.0,
    min_count: int = 100,
    plateau_from: float | None = None,
) -> RecoveryEstimate:
    """Recovery curve from the tags of a CW run alone.

    Under Poisson illumination the hazard of the next click on a pixel, as a
    function of time since its last click, is proportional to the pixel's
    efficiency at that delay.  The hazard is estimated per bin as intervals
    ending in the bin over intervals surviving to its start.
    """
    if channels is None:
        channels = range(stream.channel_count)
    gaps = []
    for ch in channels:
        ts = stream.select(ch)
        if ts.size > 1:
            gaps.append(np.diff(ts))
    gaps_ns = np.concatenate(gaps) / 1000.0 if gaps else np.zeros(0)
    nbins = math.ceil(max_lag / bin_width)
    b = np.minimum((gaps_ns / bin_width).astype(np.int64), nbins)
    ending = np.bincount(b, minlength=nbins + 1)
    at_risk = ending[::-1].cumsum()[::-1]
    ending, at_risk = ending[:nbins], at_risk[:nbins]
    # Exposure correction inside a bin: intervals ending there were at risk half a bin on average.
    exposure = (at_risk - 0.5 * ending) * bin_width
    hazard = np.divide(ending, exposure, out=np.zeros(nbins), where=exposure > 0)
    centers = (np.arange(nbins) + 0.5) * bin_width
    if plateau_from is None:
        plateau_from = 0.5 * max_lag
    return _finish_recovery(centers, hazard, at_risk, bin_width, min_count, plateau_from)
