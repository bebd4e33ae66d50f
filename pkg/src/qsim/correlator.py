"""Coincidence histograms from time-tag streams, plus the on-disk formats.

Binning: bin ``k`` is centred on ``k * bin_width`` and a delay ``d`` (integer
ps) falls in bin ``sign(d) * floor((2|d| + w) / (2w))``. Delays exactly on a
bin edge go to the bin farther from zero, which keeps auto-correlations
exactly symmetric. For even widths the centre bin therefore holds ``w - 1``
integer delays; :attr:`CorrelationHistogram.bin_widths` carries this.

The histogram spans ``2 * (window // bin_width) + 1`` bins; pairs whose delay
falls outside the outermost bins are not counted.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._util import atomic_write, max_workers
from .emitter import TimeTagStream
from .errors import FormatError, NumericalError, ParameterError

MAGIC = b"TTAG"
VERSION = 1
RECORD = np.dtype([("channel", "u1"), ("time_ps", "<u8")])

# pairs expanded per vectorized chunk
_PAIR_CHUNK = 4_000_000


@dataclass(frozen=True)
class CorrelationHistogram:
    bin_width: int
    window: int
    counts: np.ndarray = field(repr=False)
    count_a: int = 0
    count_b: int = 0
    duration: int = 0
    auto: bool = False
    # expected counts per ps of bin width for uncorrelated events; overrides
    # the rate-based value when the histogram was not built from streams
    reference: float | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.shape != (self.n_bins,):
            raise ParameterError(
                f"expected {self.n_bins} bins for window {self.window} / width {self.bin_width}, "
                f"got {counts.shape}")
        if np.any(counts < 0):
            raise ParameterError("counts must be nonnegative")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def half_bins(self) -> int:
        return self.window // self.bin_width

    @property
    def n_bins(self) -> int:
        return 2 * self.half_bins + 1

    @property
    def taus(self) -> np.ndarray:
        """Bin centres in ps."""
        k = self.half_bins
        return np.arange(-k, k + 1, dtype=np.int64) * self.bin_width

    @property
    def bin_widths(self) -> np.ndarray:
        widths = np.full(self.n_bins, float(self.bin_width))
        if self.bin_width % 2 == 0:
            widths[self.half_bins] -= 1.0
        return widths

    @property
    def center(self) -> int:
        return int(self.counts[self.half_bins])

    def accidental_density(self) -> float:
        """Expected uncorrelated counts per ps of bin width."""
        if self.reference is not None:
            return float(self.reference)
        if self.duration <= 0:
            raise NumericalError("histogram has no acquisition duration")
        pairs = self.count_a * (self.count_b - 1 if self.auto else self.count_b)
        return pairs / self.duration

    def same_geometry(self, other: "CorrelationHistogram") -> bool:
        return self.bin_width == other.bin_width and self.half_bins == other.half_bins


def empty_histogram(bin_width: int, window: int) -> CorrelationHistogram:
    return CorrelationHistogram(bin_width, window, np.zeros(2 * (window // bin_width) + 1))


def bin_index(delays: np.ndarray, bin_width: int) -> np.ndarray:
    d = np.asarray(delays, dtype=np.int64)
    mag = (2 * np.abs(d) + bin_width) // (2 * bin_width)
    return np.where(d < 0, -mag, mag)


def max_delay(bin_width: int, half_bins: int) -> int:
    """Largest |delay| that still lands in the outermost bin."""
    return math.ceil((2 * half_bins + 1) * bin_width / 2) - 1


def _check_stream(stream: TimeTagStream, name: str) -> np.ndarray:
    ts = np.asarray(stream.timestamps, dtype=np.int64)
    if ts.size > 1 and np.any(np.diff(ts) < 0):
        raise ParameterError(f"stream {name} is not sorted")
    return ts


def _count_pairs(a: np.ndarray, b: np.ndarray, bin_width: int, half_bins: int) -> np.ndarray:
    counts = np.zeros(2 * half_bins + 1, dtype=np.int64)
    if a.size == 0 or b.size == 0:
        return counts
    reach = max_delay(bin_width, half_bins)
    lo = np.searchsorted(b, a - reach, side="left")
    hi = np.searchsorted(b, a + reach, side="right")
    per_tag = hi - lo
    ends = np.cumsum(per_tag)
    start = 0
    while start < a.size:
        # grow the chunk until it holds about _PAIR_CHUNK pairs
        base = ends[start - 1] if start else 0
        stop = int(np.searchsorted(ends, base + _PAIR_CHUNK, side="right"))
        stop = max(stop, start + 1)
        n = per_tag[start:stop]
        total = int(n.sum())
        if total:
            owner = np.repeat(np.arange(start, stop), n)
            offsets = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
            j = lo[owner] + offsets
            k = bin_index(b[j] - a[owner], bin_width)
            counts += np.bincount(k + half_bins, minlength=counts.size)
        start = stop
    return counts


def cross_correlate(a: TimeTagStream, b: TimeTagStream, bin_width: int, window: int,
                    partitions: int = 1, exclude_self: bool | None = None) -> CorrelationHistogram:
    """All-pairs coincidence histogram of delays ``t_b - t_a``.

    Stream ``a`` is split into ``partitions`` contiguous pieces correlated
    independently (threaded, capped by ``QSIM_THREADS``) and summed; the
    result does not depend on the partition count. When ``a`` and ``b`` are
    the same object, the zero-delay self pairs are removed unless
    ``exclude_self`` says otherwise.
    """
    bin_width = int(bin_width)
    window = int(window)
    if bin_width < 1:
        raise ParameterError("bin_width must be >= 1 ps")
    if window < bin_width:
        raise ParameterError("window must be >= bin_width")
    ta = _check_stream(a, "a")
    tb = _check_stream(b, "b")
    if exclude_self is None:
        exclude_self = a is b
    half = window // bin_width

    partitions = max(1, min(int(partitions), max(ta.size, 1)))
    pieces = np.array_split(ta, partitions)
    workers = min(max_workers(), partitions)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            partial = list(pool.map(lambda p: _count_pairs(p, tb, bin_width, half), pieces))
    else:
        partial = [_count_pairs(p, tb, bin_width, half) for p in pieces]
    counts = np.sum(partial, axis=0) if partial else np.zeros(2 * half + 1, np.int64)
    if exclude_self:
        counts[half] -= ta.size
    duration = max(a.duration, b.duration)
    return CorrelationHistogram(bin_width, window, counts, len(a), len(b), duration,
                                auto=bool(exclude_self))


def merge(h1: CorrelationHistogram, h2: CorrelationHistogram) -> CorrelationHistogram:
    """Sum histograms accumulated over disjoint acquisitions."""
    if not h1.same_geometry(h2):
        raise ParameterError(
            f"cannot merge histograms with geometry ({h1.bin_width}, {h1.window}) "
            f"and ({h2.bin_width}, {h2.window})")
    if (h1.reference is None) != (h2.reference is None):
        if _is_blank(h1):
            return h2
        if _is_blank(h2):
            return h1
        raise ParameterError("cannot merge rate-normalized with reference-normalized histograms")
    reference = None if h1.reference is None else h1.reference + h2.reference
    return CorrelationHistogram(
        h1.bin_width, h1.window, h1.counts + h2.counts,
        h1.count_a + h2.count_a, h1.count_b + h2.count_b, h1.duration + h2.duration,
        auto=h1.auto and h2.auto, reference=reference)


def _is_blank(h: CorrelationHistogram) -> bool:
    return h.reference is None and h.duration == 0 and h.count_a == 0 and not h.counts.any()


def normalize_to_g2(hist: CorrelationHistogram, method: str = "rates") -> np.ndarray:
    """Counts per bin divided by their uncorrelated expectation.

    ``rates`` uses measured tag rates and duration; ``plateau`` uses the mean
    of the outer quarter of the window on each side, as done for lab data.
    """
    widths = hist.bin_widths
    if method == "rates":
        if hist.reference is None:
            if hist.duration <= hist.window:
                raise ParameterError("acquisition duration must exceed the correlation window")
            if hist.count_a == 0 or hist.count_b == 0:
                raise NumericalError("cannot normalize: a stream has zero rate")
        density = hist.accidental_density()
        if density <= 0:
            raise NumericalError("cannot normalize: zero accidental rate")
    elif method == "plateau":
        outer = np.abs(hist.taus) >= 0.75 * hist.half_bins * hist.bin_width
        if not outer.any():
            raise ParameterError("window too small for plateau normalization")
        density = float(np.sum(hist.counts[outer]) / np.sum(widths[outer]))
        if density <= 0:
            raise NumericalError("cannot normalize: empty plateau")
    else:
        raise ParameterError(f"unknown normalization {method!r}")
    return hist.counts / (density * widths)


# --- time-tag files ---------------------------------------------------------

def _merge_streams(streams: Sequence[TimeTagStream]) -> tuple[np.ndarray, np.ndarray]:
    if not streams:
        return np.empty(0, np.uint8), np.empty(0, np.int64)
    channels = np.concatenate([np.full(len(s), s.channel, np.uint8) for s in streams])
    times = np.concatenate([s.timestamps for s in streams])
    order = np.lexsort((channels, times))
    return channels[order], times[order]


def write_timetags(path: str | Path, streams: Sequence[TimeTagStream]) -> None:
    """Write streams as one time-sorted binary (``.ttag``) or CSV file."""
    channels, times = _merge_streams(list(streams))
    path = Path(path)
    if path.suffix.lower() == ".csv":
        buf = io.StringIO()
        buf.write("channel,time_ps\n")
        for c, t in zip(channels.tolist(), times.tolist()):
            buf.write(f"{c},{t}\n")
        atomic_write(path, buf.getvalue())
        return
    rec = np.empty(times.size, dtype=RECORD)
    rec["channel"] = channels
    rec["time_ps"] = times
    atomic_write(path, MAGIC + bytes([VERSION]) + rec.tobytes())


def _group(channels: np.ndarray, times: np.ndarray, offsets: np.ndarray) -> dict[int, TimeTagStream]:
    if times.size > 1:
        back = np.nonzero(np.diff(times) < 0)[0]
        if back.size:
            i = back[0] + 1
            raise FormatError(f"record {i} is out of time order", int(offsets[i]))
    duration = int(times[-1]) + 1 if times.size else 0
    out = {}
    for ch in np.unique(channels).tolist():
        sel = np.nonzero(channels == ch)[0]
        ts = times[sel]
        dup = np.nonzero(np.diff(ts) == 0)[0]
        if dup.size:
            raise FormatError(f"duplicate timestamp on channel {ch}", int(offsets[sel[dup[0] + 1]]))
        out[ch] = TimeTagStream(ch, ts, duration)
    return out


def read_timetags(path: str | Path) -> dict[int, TimeTagStream]:
    """Read a time-tag file into one stream per channel.

    The format has no duration field; every stream gets the last timestamp in
    the file plus one ps.
    """
    path = Path(path)
    data = path.read_bytes()
    if data[:4] == MAGIC:
        if len(data) < 5:
            raise FormatError("missing version byte", 4)
        if data[4] != VERSION:
            raise FormatError(f"unsupported version {data[4]}", 4)
        body = data[5:]
        n, rem = divmod(len(body), RECORD.itemsize)
        if rem:
            raise FormatError("truncated record", 5 + n * RECORD.itemsize)
        rec = np.frombuffer(body, dtype=RECORD, count=n)
        times = rec["time_ps"]
        if n and times.max() > np.iinfo(np.int64).max:
            i = int(np.argmax(times > np.iinfo(np.int64).max))
            raise FormatError("timestamp overflows int64", 5 + i * RECORD.itemsize + 1)
        offsets = 5 + np.arange(n) * RECORD.itemsize
        return _group(rec["channel"].copy(), times.astype(np.int64), offsets)
    return _read_csv(data)


def _read_csv(data: bytes) -> dict[int, TimeTagStream]:
    text = data.decode("ascii", errors="replace")
    lines = text.splitlines(keepends=True)
    if not lines or lines[0].strip() != "channel,time_ps":
        raise FormatError("expected TTAG magic or CSV header 'channel,time_ps'", 0)
    offset = len(lines[0].encode())
    channels, times, offsets = [], [], []
    for line in lines[1:]:
        stripped = line.strip()
        if stripped:
            parts = stripped.split(",")
            try:
                if len(parts) != 2:
                    raise ValueError
                ch, t = int(parts[0]), int(parts[1])
                if not 0 <= ch <= 255 or t < 0:
                    raise ValueError
            except ValueError:
                raise FormatError(f"bad record {stripped!r}", offset) from None
            channels.append(ch)
            times.append(t)
            offsets.append(offset)
        offset += len(line.encode())
    return _group(np.array(channels, np.uint8), np.array(times, np.int64), np.array(offsets))


def load_stream(path: str | Path, channel: int | None = None) -> TimeTagStream:
    streams = read_timetags(path)
    if channel is None:
        if len(streams) > 1:
            raise ParameterError(f"{path} holds channels {sorted(streams)}; pick one")
        if not streams:
            return TimeTagStream(0, np.empty(0, np.int64), 0)
        return next(iter(streams.values()))
    if channel not in streams:
        raise ParameterError(f"{path} has no channel {channel}")
    return streams[channel]


def histogram_csv(hist: CorrelationHistogram, g2: Iterable[float] | None = None) -> str:
    if g2 is None:
        g2 = normalize_to_g2(hist)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["tau_ps", "counts", "g2"])
    for tau, c, g in zip(hist.taus.tolist(), hist.counts.tolist(), g2):
        writer.writerow([tau, c, repr(float(g))])
    return buf.getvalue()


def write_histogram_csv(path: str | Path, hist: CorrelationHistogram, g2=None) -> None:
    atomic_write(path, histogram_csv(hist, g2))

