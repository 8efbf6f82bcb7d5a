"""Timing side channels over simulated memory and their detectors.

Two channels are modeled. The contiguity channel emits latency peaks at
aliasing-aligned positions inside physically contiguous page runs; the
row-conflict channel exposes same-bank row buffer conflicts through paired
activations. Detectors consume nothing but the timing values, so they work
unchanged against any hidden physical mapping.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dram import DramSim

# Equidistant-peak runs need at least this many peaks before they count as
# evidence of contiguity; pairs of stray noise peaks are discarded.
MIN_PEAKS_PER_RUN = 3


class MemwalkError(Exception):
    pass


@dataclass
class TimingTrace:
    """Ordered (index, latency) samples from a timing sweep."""

    indices: np.ndarray
    latencies: np.ndarray

    def __post_init__(self):
        if len(self.indices) == 0:
            raise MemwalkError("timing trace must be non-empty")
        if np.any(self.latencies <= 0):
            raise MemwalkError("latencies must be positive")

    def __len__(self) -> int:
        return len(self.indices)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "latency"])
            for i, lat in zip(self.indices, self.latencies):
                writer.writerow([int(i), repr(float(lat))])

    @classmethod
    def from_csv(cls, path) -> "TimingTrace":
        idx, lat = [], []
        with open(path) as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                idx.append(int(row[0]))
                lat.append(float(row[1]))
        return cls(np.asarray(idx), np.asarray(lat))


@dataclass(frozen=True)
class SpoilerParams:
    """Shape of the contiguity channel.

    ``alias_pages`` is the aliasing granularity: peaks appear at every page
    that starts an aliasing-granularity-sized contiguous stretch, so a
    contiguous run of R pages shows equidistant peaks spaced ``alias_pages``
    apart. Outliers model stray system interrupts.
    """

    base_latency: float = 40.0
    peak_height: float = 50.0
    alias_pages: int = 8
    outlier_rate: float = 0.0
    outlier_latency: float = 400.0


@dataclass(frozen=True)
class DetectorConfig:
    """Thresholds for the trace detectors; tune per simulated machine."""

    outlier_cutoff: float = 200.0
    peak_threshold: float = 65.0
    min_region_pages: int = 8
    spacing_tolerance: int = 1

    def __post_init__(self):
        if not self.outlier_cutoff > self.peak_threshold > 0:
            raise MemwalkError("need outlier_cutoff > peak_threshold > 0")


def contiguous_runs(frames: list[int]) -> list[tuple[int, int]]:
    """Maximal runs of physically consecutive frames, as (start index, length)."""
    runs = []
    start = 0
    for i in range(1, len(frames) + 1):
        if i == len(frames) or frames[i] != frames[i - 1] + 1:
            runs.append((start, i - start))
            start = i
    return runs


def spoiler_trace(frames: list[int],
                  params: SpoilerParams,
                  rng: np.random.Generator,
                  noise: float = 0.0) -> TimingTrace:
    """Timing sweep over a buffer whose pages map to ``frames``.

    Latency peaks mark buffer indices where the underlying physical pages
    begin an aliasing-granularity contiguous stretch. Gaussian noise of the
    given standard deviation is added everywhere, and occasional outlier
    spikes replace samples at ``params.outlier_rate``.
    """
    n = len(frames)
    if n == 0:
        raise MemwalkError("buffer is empty")
    lat = np.full(n, params.base_latency)
    for start, length in contiguous_runs(frames):
        if length < params.alias_pages:
            continue
        for rel in range(0, length - params.alias_pages + 1, params.alias_pages):
            lat[start + rel] += params.peak_height
    if noise > 0:
        lat = lat + rng.normal(0.0, noise, size=n)
    if params.outlier_rate > 0:
        outliers = rng.random(n) < params.outlier_rate
        lat[outliers] = params.outlier_latency
    lat = np.maximum(lat, 1.0)
    return TimingTrace(np.arange(n), lat)


def detect_contiguous(trace: TimingTrace, cfg: DetectorConfig) -> list[tuple[int, int]]:
    """Recover contiguous regions as (start index, length in pages).

    Samples above the outlier cutoff are dropped, samples above the peak
    threshold become peaks, and maximal runs of equidistant peaks (spacing
    tolerance ±1 sample) long enough to satisfy ``min_region_pages`` are
    returned. A run's length closes one spacing past its last peak.
    """
    keep = trace.latencies <= cfg.outlier_cutoff
    peaks = trace.indices[keep & (trace.latencies > cfg.peak_threshold)]
    if len(peaks) < MIN_PEAKS_PER_RUN:
        return []

    regions: list[tuple[int, int]] = []
    run: list[int] = [int(peaks[0])]
    spacing = None

    def close_run():
        if spacing is not None and len(run) >= MIN_PEAKS_PER_RUN:
            length = run[-1] - run[0] + spacing
            if length >= cfg.min_region_pages:
                regions.append((run[0], length))

    for p in peaks[1:]:
        p = int(p)
        gap = p - run[-1]
        if spacing is None:
            spacing = gap
            run.append(p)
        elif abs(gap - spacing) <= cfg.spacing_tolerance:
            run.append(p)
        else:
            close_run()
            run = [p]
            spacing = None
    close_run()
    return regions


class RowConflictProbe:
    """Paired-activation latency oracle backed by the DRAM simulator.

    The probe resolves page indices to rows internally (that is the hardware
    doing the mapping); callers only ever see latencies.
    """

    def __init__(self, dram: DramSim, frame_of, noise: float = 0.0,
                 rng: np.random.Generator | None = None):
        self._dram = dram
        self._frame_of = frame_of
        self._noise = noise
        self._rng = rng

    def pair_latency(self, page_a: int, page_b: int) -> float:
        """Mean steady-state latency of alternating access to two pages."""
        ba, ra, _ = self._dram.frame_location(self._frame_of(page_a))
        bb, rb, _ = self._dram.frame_location(self._frame_of(page_b))
        self._dram.activate(ba, ra)
        self._dram.activate(bb, rb)
        lat = (self._dram.activate(ba, ra) + self._dram.activate(bb, rb)) / 2.0
        if self._noise > 0 and self._rng is not None:
            lat += float(self._rng.normal(0.0, self._noise))
        return max(lat, 1.0)


def detect_same_bank(base: int, candidates: list[int],
                     probe: RowConflictProbe,
                     threshold: float) -> tuple[list[int], list[int]]:
    """Split candidates into (same bank as base, different bank).

    Same-bank different-row pairs conflict on every alternation and exceed
    the threshold; same-row pairs are indistinguishable from different-bank
    pairs on this channel, so candidates should sit in distinct rows.
    """
    same, different = [], []
    for cand in candidates:
        if probe.pair_latency(base, cand) > threshold:
            same.append(cand)
        else:
            different.append(cand)
    return same, different


def partition_banks(pages: list[int], probe: RowConflictProbe,
                    threshold: float) -> list[list[int]]:
    """Group pages into bank-equivalence classes using only latencies."""
    remaining = list(pages)
    groups: list[list[int]] = []
    while remaining:
        base = remaining[0]
        rest = remaining[1:]
        same, different = detect_same_bank(base, rest, probe, threshold)
        groups.append([base] + same)
        remaining = different
    return groups


@dataclass(frozen=True)
class HammerSet:
    """Aggressor/victim assignment inside one detected contiguous region.

    Positions are row-slot offsets from the start of the bank's row sequence
    in the region; ``aggressor_pages``/``victim_pages`` carry the page pairs
    of each row slot in buffer-index space.
    """

    bank_label: int
    aggressor_slots: tuple[int, ...]
    victim_slots: tuple[int, ...]
    aggressor_pages: tuple[tuple[int, ...], ...]
    victim_pages: tuple[tuple[int, ...], ...]


def interleave_rows(n_rows: int, n_sided: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Alternating aggressor/victim offsets for ``n_sided`` aggressors.

    Prefers the victims-outside layout (needs 2n+1 rows, aggressors at odd
    offsets); falls back to aggressors-outside (2n-1 rows) when the region
    is one row pair short, which covers classic double-sided.
    """
    if n_sided < 1:
        raise MemwalkError("n_sided must be at least 1")
    if n_rows >= 2 * n_sided + 1:
        aggressors = tuple(range(1, 2 * n_sided, 2))
        victims = tuple(range(0, 2 * n_sided + 1, 2))
    elif n_rows >= 2 * n_sided - 1:
        aggressors = tuple(range(0, 2 * n_sided - 1, 2))
        victims = tuple(range(1, 2 * n_sided - 1, 2))
    else:
        raise MemwalkError(
            f"region of {n_rows} rows is too small for a {n_sided}-sided pattern")
    return aggressors, victims


def assemble_hammer_sets(regions: list[tuple[int, int]],
                         bank_groups: list[list[int]],
                         n_sided: int) -> list[HammerSet]:
    """Build hammer-ready aggressor/victim sets from detector output.

    Within a contiguous region, adjacent pages sharing a bank group form a
    row slot, and successive slots of the same group are physically adjacent
    rows of that bank. One set per (region, bank) with enough rows is
    returned; regions without a large enough bank sequence are skipped.
    """
    label_of: dict[int, int] = {}
    for label, group in enumerate(bank_groups):
        for page in group:
            label_of[page] = label

    sets: list[HammerSet] = []
    for start, length in regions:
        pages = list(range(start, start + length))
        slots: dict[int, list[tuple[int, ...]]] = {}
        i = 0
        while i + 1 < len(pages):
            a, b = pages[i], pages[i + 1]
            if label_of.get(a) is not None and label_of.get(a) == label_of.get(b):
                slots.setdefault(label_of[a], []).append((a, b))
                i += 2
            else:
                i += 1
        for label, row_slots in sorted(slots.items()):
            try:
                agg, vic = interleave_rows(len(row_slots), n_sided)
            except MemwalkError:
                continue
            sets.append(HammerSet(
                bank_label=label,
                aggressor_slots=agg,
                victim_slots=vic,
                aggressor_pages=tuple(row_slots[i] for i in agg),
                victim_pages=tuple(row_slots[i] for i in vic),
            ))
    return sets
