"""DRAM model: geometry, activation timing, refresh, TRR, and hammer-induced flips.

The model is deliberately simple but covers every observable the rest of the
simulator needs:

* a fixed, documented physical address mapping (bank-interleaved row-major);
* row-buffer hit/conflict latencies (the timing side channel);
* per-window activation accounting with periodic refresh;
* an in-DRAM Target Row Refresh (TRR) sampler with a bounded tracker;
* a per-cell Bernoulli flip model driven by a ``FlipProfile``.

Flips are only possible in rows physically adjacent to an aggressor row
(distance 1; a distance-2 extension can be enabled) whose accumulated
adjacent activations within one refresh window reach the hammer threshold.
All randomness comes from the generator passed at construction, so identical
seeds and call sequences produce identical flip streams.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAGE_SIZE = 4096
PAGE_BITS = 12
BITS_PER_PAGE = PAGE_SIZE * 8

# Flip direction encoded as the value the bit acquires.
ZERO_TO_ONE = 1
ONE_TO_ZERO = 0

_DIRECTION_NAMES = {ZERO_TO_ONE: "0to1", ONE_TO_ZERO: "1to0"}
_DIRECTION_VALUES = {v: k for k, v in _DIRECTION_NAMES.items()}

_ZERO_PAGE = bytes(PAGE_SIZE)


class DramError(Exception):
    """Invalid address, geometry, or hammer pattern."""


@dataclass(frozen=True)
class DramGeometry:
    """Shape of the modeled DRAM.

    Capacity is ``banks * rows_per_bank * row_size_bytes``. Rows are split
    into ``row_size_bytes / page_size_bytes`` OS pages. ``refresh_period_ms``
    of ``None`` disables refresh entirely (useful for accumulation tests).
    """

    banks: int = 8
    rows_per_bank: int = 1024
    row_size_bytes: int = 8192
    page_size_bytes: int = PAGE_SIZE
    refresh_period_ms: float | None = 64.0

    def __post_init__(self):
        if self.banks <= 0 or self.rows_per_bank <= 0 or self.row_size_bytes <= 0:
            raise DramError("geometry counts must be positive")
        if self.row_size_bytes % self.page_size_bytes != 0:
            raise DramError("row size must be a multiple of the page size")
        if self.refresh_period_ms is not None and self.refresh_period_ms <= 0:
            raise DramError("refresh period must be positive or None")

    @property
    def pages_per_row(self) -> int:
        return self.row_size_bytes // self.page_size_bytes

    @property
    def capacity_bytes(self) -> int:
        return self.banks * self.rows_per_bank * self.row_size_bytes

    @property
    def total_pages(self) -> int:
        return self.capacity_bytes // self.page_size_bytes

    @property
    def bits_per_row(self) -> int:
        return self.row_size_bytes * 8


@dataclass(frozen=True, order=True)
class CellAddress:
    """One DRAM cell: (bank, row, bit index within the row)."""

    bank: int
    row: int
    bit: int


@dataclass(frozen=True)
class FlipCell:
    """Susceptibility of one cell: flip probability per qualifying round and direction."""

    prob: float
    to_value: int  # ZERO_TO_ONE or ONE_TO_ZERO

    def __post_init__(self):
        if not 0.0 < self.prob <= 1.0:
            raise DramError(f"flip probability must be in (0, 1], got {self.prob}")
        if self.to_value not in (0, 1):
            raise DramError("flip direction must be 0 or 1")


class FlipProfile:
    """Ground-truth map of flippable cells for a DRAM region.

    Cells absent from the map never flip. Stored line-based as
    ``bank row bit direction prob`` with direction ``0to1`` or ``1to0``.
    """

    def __init__(self, cells: dict[CellAddress, FlipCell] | None = None):
        self.cells: dict[CellAddress, FlipCell] = dict(cells or {})

    def __len__(self) -> int:
        return len(self.cells)

    def validate(self, geometry: DramGeometry) -> None:
        for cell in self.cells:
            if not (0 <= cell.bank < geometry.banks
                    and 0 <= cell.row < geometry.rows_per_bank
                    and 0 <= cell.bit < geometry.bits_per_row):
                raise DramError(f"profile cell out of geometry bounds: {cell}")

    def by_row(self) -> dict[tuple[int, int], list[tuple[int, FlipCell]]]:
        """Cells grouped by (bank, row), bit-sorted, for fast hammer lookups."""
        index: dict[tuple[int, int], list[tuple[int, FlipCell]]] = {}
        for cell, spec in sorted(self.cells.items()):
            index.setdefault((cell.bank, cell.row), []).append((cell.bit, spec))
        return index

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for cell, spec in sorted(self.cells.items()):
                fh.write(f"{cell.bank} {cell.row} {cell.bit} "
                         f"{_DIRECTION_NAMES[spec.to_value]} {spec.prob!r}\n")

    @classmethod
    def load(cls, path) -> "FlipProfile":
        cells: dict[CellAddress, FlipCell] = {}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 5 or parts[3] not in _DIRECTION_VALUES:
                    raise DramError(f"bad flip profile record at line {lineno}: {line!r}")
                bank, row, bit = int(parts[0]), int(parts[1]), int(parts[2])
                cells[CellAddress(bank, row, bit)] = FlipCell(
                    prob=float(parts[4]), to_value=_DIRECTION_VALUES[parts[3]])
        return cls(cells)


def generate_mixture_profile(geometry: DramGeometry,
                             rng: np.random.Generator,
                             n_cells: int,
                             low_fraction: float = 0.85,
                             low_range: tuple[float, float] = (0.001, 0.05),
                             high_range: tuple[float, float] = (0.9, 1.0)) -> FlipProfile:
    """Draw a bimodal reproducibility profile.

    Most cells are barely reproducible (``low_range``), a minority is highly
    reproducible (``high_range``); directions are uniform. Cell positions are
    uniform over the whole geometry without duplicates.
    """
    cells: dict[CellAddress, FlipCell] = {}
    while len(cells) < n_cells:
        bank = int(rng.integers(0, geometry.banks))
        row = int(rng.integers(0, geometry.rows_per_bank))
        bit = int(rng.integers(0, geometry.bits_per_row))
        addr = CellAddress(bank, row, bit)
        if addr in cells:
            continue
        lo, hi = low_range if rng.random() < low_fraction else high_range
        prob = float(rng.uniform(lo, hi))
        to_value = ZERO_TO_ONE if rng.random() < 0.5 else ONE_TO_ZERO
        cells[addr] = FlipCell(prob=prob, to_value=to_value)
    return FlipProfile(cells)


def planted_profile(cells: list[tuple[int, int, int, int, float]]) -> FlipProfile:
    """Profile from explicit (bank, row, bit, to_value, prob) tuples."""
    return FlipProfile({
        CellAddress(b, r, bit): FlipCell(prob=p, to_value=tv)
        for b, r, bit, tv, p in cells
    })


@dataclass
class TrrState:
    """Target Row Refresh sampler configuration and per-bank tracker.

    The sampler tracks at most ``sampler_capacity`` aggressor candidates per
    bank (frequency top-k: a new row only evicts the least-activated tracked
    row if it has strictly more window activations). When a tracked row
    accumulates ``mac`` activations, its distance-1 neighbors are refreshed,
    resetting their disturbance. Effective mitigation requires
    ``2 * mac <= hammer threshold``; the tracker clears on every refresh tick.
    """

    enabled: bool = False
    sampler_capacity: int = 4
    mac: int = 250_000
    tracked: dict[tuple[int, int], int] = field(default_factory=dict)

    def clear(self) -> None:
        self.tracked.clear()

    def bank_tracked(self, bank: int) -> list[tuple[int, int]]:
        return [key for key in self.tracked if key[0] == bank]


@dataclass(frozen=True)
class HammerPattern:
    """One hammer run: aggressor rows in a single bank plus access schedule.

    ``accesses_per_round`` is the total number of row activations issued per
    round, distributed round-robin over the aggressors (remainder dropped).
    ``fenced`` asserts ordered access; the model always behaves as if fenced,
    an unfenced pattern is rejected to mirror the requirement that ordering
    be preserved for multi-row patterns.
    """

    bank: int
    aggressor_rows: tuple[int, ...]
    accesses_per_round: int = 1_000_000
    rounds: int = 100
    inter_round_nops: int = 100_000
    fenced: bool = True

    def __post_init__(self):
        rows = tuple(self.aggressor_rows)
        object.__setattr__(self, "aggressor_rows", rows)
        if not rows:
            raise DramError("hammer pattern needs at least one aggressor row")
        if len(set(rows)) != len(rows):
            raise DramError("aggressor rows must be distinct")
        if self.accesses_per_round < len(rows):
            raise DramError("accesses_per_round must cover every aggressor row")
        if self.rounds <= 0:
            raise DramError("rounds must be positive")
        if not self.fenced and len(rows) > 1:
            raise DramError("multi-row patterns require fenced access ordering")


@dataclass(frozen=True)
class FlipEvent:
    """A bit flip produced by hammering, with its physical location and time."""

    cell: CellAddress
    frame: int
    page_bit: int
    before: int
    after: int
    time: int


@dataclass(frozen=True)
class Timing:
    """Simulated latencies in ticks and the tick/millisecond exchange rate."""

    row_hit: int = 10
    row_conflict: int = 45
    nop: int = 1
    ticks_per_ms: int = 10_000_000


class DramSim:
    """Single-bank-group DRAM simulator with hammer and page I/O.

    Time is a monotonically increasing tick counter. Refresh boundaries fall
    every ``refresh_period_ms`` and clear window activation counters, victim
    disturbance accumulators, and the TRR tracker. Pages read as zeros until
    written.
    """

    def __init__(self,
                 geometry: DramGeometry,
                 profile: FlipProfile | None = None,
                 trr: TrrState | None = None,
                 rng: np.random.Generator | None = None,
                 hammer_threshold: int = 1_000_000,
                 timing: Timing = Timing(),
                 include_distance_2: bool = False):
        self.geometry = geometry
        self.profile = profile or FlipProfile()
        self.profile.validate(geometry)
        self._cells_by_row = self.profile.by_row()
        self.trr = trr or TrrState(enabled=False)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.hammer_threshold = hammer_threshold
        self.timing = timing
        self.include_distance_2 = include_distance_2

        self.now = 0
        if geometry.refresh_period_ms is None:
            self._refresh_ticks = None
            self._next_refresh = None
        else:
            self._refresh_ticks = int(geometry.refresh_period_ms * timing.ticks_per_ms)
            self._next_refresh = self._refresh_ticks

        self._open_row: list[int | None] = [None] * geometry.banks
        self._acts: dict[tuple[int, int], int] = {}   # window activations per row
        self._adj: dict[tuple[int, int], int] = {}    # window adjacent-aggressor activations
        self._pages: dict[int, bytes | bytearray] = {}
        self.flip_log: list[FlipEvent] = []

    # -- address mapping ---------------------------------------------------

    def map_phys_to_dram(self, phys_addr: int) -> tuple[int, int, int]:
        """Map a physical byte address to (bank, row, byte offset in row).

        The mapping is bank-interleaved row-major: consecutive row-sized
        blocks walk the banks, then advance the row. It is bijective over
        the capacity.
        """
        if not 0 <= phys_addr < self.geometry.capacity_bytes:
            raise DramError(f"physical address out of range: {phys_addr:#x}")
        block, offset = divmod(phys_addr, self.geometry.row_size_bytes)
        bank = block % self.geometry.banks
        row = block // self.geometry.banks
        return bank, row, offset

    def dram_to_phys(self, bank: int, row: int, offset: int = 0) -> int:
        """Inverse of :meth:`map_phys_to_dram`."""
        self._check_row(bank, row)
        if not 0 <= offset < self.geometry.row_size_bytes:
            raise DramError("row offset out of range")
        return (row * self.geometry.banks + bank) * self.geometry.row_size_bytes + offset

    def frame_location(self, frame: int) -> tuple[int, int, int]:
        """Map a page frame number to (bank, row, byte offset in row)."""
        return self.map_phys_to_dram(frame * self.geometry.page_size_bytes)

    def frames_of_row(self, bank: int, row: int) -> list[int]:
        base = self.dram_to_phys(bank, row) // self.geometry.page_size_bytes
        return [base + i for i in range(self.geometry.pages_per_row)]

    def _check_row(self, bank: int, row: int) -> None:
        if not (0 <= bank < self.geometry.banks and 0 <= row < self.geometry.rows_per_bank):
            raise DramError(f"row address out of range: bank {bank}, row {row}")

    # -- refresh and activation --------------------------------------------

    def refresh_tick(self) -> None:
        """Apply any refresh boundaries that ``now`` has crossed."""
        if self._next_refresh is None:
            return
        while self.now >= self._next_refresh:
            self._acts.clear()
            self._adj.clear()
            self.trr.clear()
            self._next_refresh += self._refresh_ticks

    def wait_for_refresh(self) -> None:
        """Idle until just past the next refresh boundary (profiling aid)."""
        if self._next_refresh is None:
            return
        self.now = max(self.now, self._next_refresh)
        self.refresh_tick()

    def activate(self, bank: int, row: int) -> int:
        """Activate a row, returning the observed latency in ticks.

        A row-buffer conflict (bank's open row differs) costs the slow
        latency; re-activating the open row is fast. Activation restores the
        row's own cells, so its accumulated disturbance resets.
        """
        self._check_row(bank, row)
        self.refresh_tick()
        if self._open_row[bank] == row:
            latency = self.timing.row_hit
        else:
            latency = self.timing.row_conflict
            self._open_row[bank] = row
        self.now += latency
        key = (bank, row)
        self._acts[key] = self._acts.get(key, 0) + 1
        self._adj[key] = 0
        self._trr_observe(bank, row, self._acts[key], 1)
        for nb in self._neighbors(row):
            nb_key = (bank, nb)
            self._adj[nb_key] = self._adj.get(nb_key, 0) + 1
        self._trr_fire_due(bank)
        return latency

    def _neighbors(self, row: int) -> list[int]:
        dists = (1, 2) if self.include_distance_2 else (1,)
        out = []
        for d in dists:
            if row - d >= 0:
                out.append(row - d)
            if row + d < self.geometry.rows_per_bank:
                out.append(row + d)
        return out

    def _trr_observe(self, bank: int, row: int, window_acts: int, delta: int) -> None:
        if not self.trr.enabled:
            return
        key = (bank, row)
        tracked = self.trr.tracked
        if key in tracked:
            tracked[key] += delta
            return
        bank_keys = self.trr.bank_tracked(bank)
        if len(bank_keys) < self.trr.sampler_capacity:
            tracked[key] = delta
            return
        min_key = min(bank_keys, key=lambda k: self._acts.get(k, 0))
        if window_acts > self._acts.get(min_key, 0):
            del tracked[min_key]
            tracked[key] = delta

    def _trr_fire_due(self, bank: int) -> None:
        """Neighbor-refresh every tracked row that reached the MAC."""
        if not self.trr.enabled:
            return
        for key in self.trr.bank_tracked(bank):
            count = self.trr.tracked[key]
            if count >= self.trr.mac:
                self.trr.tracked[key] = count % self.trr.mac
                for nb in self._neighbors(key[1]):
                    self._adj[(bank, nb)] = 0

    # -- hammering -----------------------------------------------------------

    def hammer(self, pattern: HammerPattern) -> list[FlipEvent]:
        """Execute a hammer pattern and return the flips it produced.

        Victim rows qualify per round when their in-window disturbance
        reaches the hammer threshold; each profiled cell in a qualifying row
        then flips with its configured probability, in its configured
        direction, if the current bit value permits. Rows that are
        themselves aggressors never flip (activation restores them).
        """
        bank = pattern.bank
        for row in pattern.aggressor_rows:
            self._check_row(bank, row)
        rows = list(pattern.aggressor_rows)
        passes_per_round = pattern.accesses_per_round // len(rows)
        t_pass = len(rows) * (self.timing.row_conflict if len(rows) > 1
                              else self.timing.row_hit)
        aggressors = set(rows)
        victims = sorted({nb for row in rows for nb in self._neighbors(row)} - aggressors)

        events: list[FlipEvent] = []
        for _ in range(pattern.rounds):
            self.refresh_tick()
            self._run_passes(bank, rows, passes_per_round, t_pass, aggressors)
            for victim in victims:
                if self._adj.get((bank, victim), 0) >= self.hammer_threshold:
                    events.extend(self._roll_row(bank, victim))
            self.now += pattern.inter_round_nops * self.timing.nop
        if rows:
            self._open_row[bank] = rows[-1]
        self.refresh_tick()
        self.flip_log.extend(events)
        return events

    def _run_passes(self, bank: int, rows: list[int], passes: int, t_pass: int,
                    aggressors: set[int]) -> None:
        """Advance ``passes`` round-robin passes in event-sized chunks."""
        neighbor_targets: dict[tuple[int, int], int] = {}
        for row in rows:
            for nb in self._neighbors(row):
                if nb not in aggressors:
                    key = (bank, nb)
                    neighbor_targets[key] = neighbor_targets.get(key, 0) + 1

        remaining = passes
        while remaining > 0:
            self.refresh_tick()
            chunk = remaining
            if self._next_refresh is not None:
                ticks_left = self._next_refresh - self.now
                chunk = min(chunk, max(1, ticks_left // t_pass))
            if self.trr.enabled:
                for row in rows:
                    key = (bank, row)
                    if key in self.trr.tracked:
                        due = self.trr.mac - self.trr.tracked[key]
                        chunk = min(chunk, max(1, due))
            chunk = int(chunk)

            self.now += chunk * t_pass
            for row in rows:
                key = (bank, row)
                acts = self._acts.get(key, 0) + chunk
                self._acts[key] = acts
                self._adj[key] = 0
                self._trr_observe(bank, row, acts, chunk)
            for key, weight in neighbor_targets.items():
                self._adj[key] = self._adj.get(key, 0) + chunk * weight
            self._trr_fire_due(bank)
            remaining -= chunk

    def _roll_row(self, bank: int, row: int) -> list[FlipEvent]:
        cells = self._cells_by_row.get((bank, row))
        if not cells:
            return []
        events = []
        row_phys = self.dram_to_phys(bank, row)
        for bit, spec in cells:
            frame = (row_phys + bit // 8) // self.geometry.page_size_bytes
            page_bit = bit % BITS_PER_PAGE
            current = self._read_bit(frame, page_bit)
            if current == spec.to_value:
                continue
            if self.rng.random() < spec.prob:
                self._write_bit(frame, page_bit, spec.to_value)
                events.append(FlipEvent(
                    cell=CellAddress(bank, row, bit), frame=frame,
                    page_bit=page_bit, before=current, after=spec.to_value,
                    time=self.now))
        return events

    # -- page storage ----------------------------------------------------------

    def _check_frame(self, frame: int) -> None:
        if not 0 <= frame < self.geometry.total_pages:
            raise DramError(f"page frame out of range: {frame}")

    def read_page(self, frame: int) -> bytes:
        """Read a 4096-byte page (activates the containing row)."""
        self._check_frame(frame)
        bank, row, _ = self.frame_location(frame)
        self.activate(bank, row)
        data = self._pages.get(frame, _ZERO_PAGE)
        return bytes(data) if isinstance(data, bytearray) else data

    def write_page(self, frame: int, data: bytes) -> None:
        """Write a whole page (activates the containing row)."""
        self._check_frame(frame)
        if len(data) != self.geometry.page_size_bytes:
            raise DramError("page writes must cover the whole page")
        bank, row, _ = self.frame_location(frame)
        self.activate(bank, row)
        self._pages[frame] = data if type(data) is bytes else bytes(data)

    def read_slice(self, frame: int, offset: int, length: int) -> bytes:
        self._check_frame(frame)
        if offset < 0 or offset + length > self.geometry.page_size_bytes:
            raise DramError("slice outside page")
        bank, row, _ = self.frame_location(frame)
        self.activate(bank, row)
        data = self._pages.get(frame, _ZERO_PAGE)
        return bytes(data[offset:offset + length])

    def write_slice(self, frame: int, offset: int, data: bytes) -> None:
        self._check_frame(frame)
        if offset < 0 or offset + len(data) > self.geometry.page_size_bytes:
            raise DramError("slice outside page")
        bank, row, _ = self.frame_location(frame)
        self.activate(bank, row)
        page = self._pages.get(frame)
        if page is None:
            page = bytearray(self.geometry.page_size_bytes)
        elif not isinstance(page, bytearray):
            page = bytearray(page)
        page[offset:offset + len(data)] = data
        self._pages[frame] = page

    def _read_bit(self, frame: int, page_bit: int) -> int:
        data = self._pages.get(frame)
        if data is None:
            return 0
        return (data[page_bit >> 3] >> (page_bit & 7)) & 1

    def _write_bit(self, frame: int, page_bit: int, value: int) -> None:
        page = self._pages.get(frame)
        if page is None:
            page = bytearray(self.geometry.page_size_bytes)
            self._pages[frame] = page
        elif not isinstance(page, bytearray):
            page = bytearray(page)
            self._pages[frame] = page
        byte, pos = page_bit >> 3, page_bit & 7
        if value:
            page[byte] |= 1 << pos
        else:
            page[byte] &= ~(1 << pos)
