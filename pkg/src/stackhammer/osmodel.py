"""OS model: LIFO page-frame allocation, process images, stack ASLR, signals.

The kernel here is a single-threaded state machine over one DRAM simulator.
Processes allocate frames from a strict LIFO free stack (the buddy-allocator
front that makes bait-page placement work), get an ASLR-randomized stack top,
and can spill registers to their stack either through signal handlers or
around blocking windows.

Placement model: a variable's in-page offset carries the ASLR entropy (its
low 4 bits stay constant per program), while the stack page it occupies is a
pure function of the program's layout. Real kernels couple the two at page
boundaries; the simulator models placement variability separately through
the placement-noise knob so the two effects can be studied independently.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .dram import PAGE_BITS, PAGE_SIZE, DramSim

REGISTER_NAMES = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
                  "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15")

# Nominal (pre-randomization) stack pointer; in-page offset 0xff0.
NOMINAL_SP = 0x7FFF_FFFF_EFF0
TEXT_VA = 0x0040_0000
DATA_VA = 0x0060_0000
FILLER_VA = 0x1000_0000

ASLR_RAND_BITS = 13


class OsError(Exception):
    pass


class Signal(enum.Enum):
    SIGINT = "SIGINT"
    SIGUSR1 = "SIGUSR1"
    SIGSTOP = "SIGSTOP"
    SIGCONT = "SIGCONT"


class ProcState(enum.Enum):
    RUNNING = "running"
    BLOCKED = "blocked"
    STOPPED = "stopped"
    EXITED = "exited"


def align_stack(sp: int, rand: int) -> int:
    """Randomize and align a stack pointer the way the kernel does.

    Subtracts the random value, then masks to 16-byte alignment. With a
    13-bit ``rand`` the reachable in-page offsets are the 256 16-aligned
    slots, i.e. 8 bits of effective offset entropy.
    """
    return (sp - rand) & ~0xF


@dataclass(frozen=True)
class AddrLayout:
    """Physical address split into frame number and page offset."""

    phys_bits: int
    page_bits: int = PAGE_BITS

    @property
    def frame_bits(self) -> int:
        return self.phys_bits - self.page_bits

    @classmethod
    def from_total_bytes(cls, total: int) -> "AddrLayout":
        bits = int(math.log2(total))
        if 2**bits != total:
            raise OsError("total memory must be a power of two")
        return cls(phys_bits=bits)


class FreeStack:
    """Strict LIFO free list of page-frame numbers."""

    def __init__(self, frames=()):
        self._frames: list[int] = list(frames)
        self._members = set(self._frames)
        if len(self._members) != len(self._frames):
            raise OsError("duplicate frames in free stack")

    def __len__(self) -> int:
        return len(self._frames)

    def __contains__(self, frame: int) -> bool:
        return frame in self._members

    def push(self, frame: int) -> None:
        if frame in self._members:
            raise OsError(f"frame {frame} is already free")
        self._frames.append(frame)
        self._members.add(frame)

    def pop(self) -> int:
        if not self._frames:
            raise OsError("out of memory: free stack is empty")
        frame = self._frames.pop()
        self._members.remove(frame)
        return frame


@dataclass
class Residency:
    """Interval during which a value lives at a physical bit range."""

    frame: int
    bit_lo: int
    bit_hi: int
    start: int
    end: int | None = None

    def covers(self, frame: int, page_bit: int, time: int) -> bool:
        if frame != self.frame or not self.bit_lo <= page_bit < self.bit_hi:
            return False
        end = self.end if self.end is not None else float("inf")
        return self.start <= time <= end


@dataclass
class Process:
    """A spawned victim: address space, registers, and signal state."""

    pid: int
    program: object
    page_table: dict[int, int]
    alloc_order: list[int]
    stack_top: int
    aslr_rand: int
    var_va: dict[str, int]
    registers: dict[str, int] = field(default_factory=lambda: {r: 0 for r in REGISTER_NAMES})
    minor_faults: int = 0
    state: ProcState = ProcState.RUNNING
    handler_active: bool = False
    signal_spill_va: int = 0
    window_open: bool = False
    window_log: list[tuple[str, int]] = field(default_factory=list)
    residency: dict[str, list[Residency]] = field(default_factory=dict)

    def var_offset(self, name: str) -> int:
        return self.var_va[name] & (PAGE_SIZE - 1)

    def frame_index_in_allocs(self, frame: int) -> int:
        return self.alloc_order.index(frame)


class Machine:
    """The simulated host: DRAM, the free-frame stack, and processes."""

    def __init__(self, dram: DramSim,
                 aslr_rng: np.random.Generator,
                 placement_rng: np.random.Generator,
                 profiling: bool = False):
        self.dram = dram
        self.free = FreeStack(range(dram.geometry.total_pages))
        self.aslr_rng = aslr_rng
        self.placement_rng = placement_rng
        self.profiling = profiling
        self.procs: dict[int, Process] = {}
        self._next_pid = 1000

    @property
    def now(self) -> int:
        return self.dram.now

    # -- frame allocation -----------------------------------------------------

    def alloc_frame(self) -> int:
        return self.free.pop()

    def free_frame(self, frame: int) -> None:
        self.free.push(frame)

    # -- process lifecycle ------------------------------------------------------

    def spawn(self, program, aslr: bool = True, placement_noise: float = 0.0) -> Process:
        """Create a process image for a gadget program.

        Frames are drawn LIFO in program-defined order: text, data, filler,
        then stack pages top-down. With probability ``placement_noise`` the
        filler consumption is perturbed by a small signed amount, modeling
        run-to-run allocation variability.
        """
        rand = int(self.aslr_rng.integers(0, 1 << ASLR_RAND_BITS)) if aslr else 0
        stack_top = align_stack(NOMINAL_SP, rand)

        nfiller = program.filler_frames
        if placement_noise > 0 and self.placement_rng.random() < placement_noise:
            magnitude = int(self.placement_rng.integers(1, 4))
            sign = 1 if self.placement_rng.random() < 0.5 else -1
            nfiller = max(0, nfiller + sign * magnitude)

        page_table: dict[int, int] = {}
        alloc_order: list[int] = []

        def map_page(vpage: int) -> None:
            frame = self.alloc_frame()
            page_table[vpage] = frame
            alloc_order.append(frame)

        for i in range(program.text_pages):
            map_page((TEXT_VA >> PAGE_BITS) + i)
        for i in range(program.data_pages):
            map_page((DATA_VA >> PAGE_BITS) + i)
        for i in range(nfiller):
            map_page((FILLER_VA >> PAGE_BITS) + i)

        nominal_vpage = NOMINAL_SP >> PAGE_BITS
        for d in range(program.stack_pages):
            map_page(nominal_vpage - d)

        var_va: dict[str, int] = {}
        for var in program.variables:
            delta = self._layout_page_delta(var.offset_from_top)
            if delta >= program.stack_pages:
                raise OsError(f"variable {var.name} falls outside the stack pages")
            offset = (stack_top - var.offset_from_top) & (PAGE_SIZE - 1)
            var_va[var.name] = ((nominal_vpage - delta) << PAGE_BITS) | offset

        proc = Process(
            pid=self._next_pid, program=program, page_table=page_table,
            alloc_order=alloc_order, stack_top=stack_top, aslr_rand=rand,
            var_va=var_va,
            signal_spill_va=(nominal_vpage - (program.stack_pages - 1)) << PAGE_BITS,
        )
        self._next_pid += 1

        lo, hi, count_in, count_out = program.fault_profile
        target_off = proc.var_offset(program.target)
        proc.minor_faults = count_in if lo <= target_off <= hi else count_out
        self.procs[proc.pid] = proc
        return proc

    @staticmethod
    def _layout_page_delta(offset_from_top: int) -> int:
        nominal_top_offset = NOMINAL_SP & (PAGE_SIZE - 1)
        return max(0, (offset_from_top - nominal_top_offset + PAGE_SIZE - 1) >> PAGE_BITS)

    def exit(self, proc: Process) -> None:
        """Tear down a process, returning frames in reverse allocation order."""
        if proc.state is ProcState.EXITED:
            raise OsError("process already exited")
        for frame in reversed(proc.alloc_order):
            self.free_frame(frame)
        proc.state = ProcState.EXITED

    # -- virtual memory ----------------------------------------------------------

    def _frame_for(self, proc: Process, vpage: int) -> int:
        try:
            return proc.page_table[vpage]
        except KeyError:
            raise OsError(f"unmapped virtual page {vpage:#x} in pid {proc.pid}") from None

    def translate(self, proc: Process, va: int) -> int:
        """Virtual-to-physical translation; profiling mode only."""
        if not self.profiling:
            raise OsError("address translation requires profiling mode")
        frame = self._frame_for(proc, va >> PAGE_BITS)
        return (frame << PAGE_BITS) | (va & (PAGE_SIZE - 1))

    def write_virtual(self, proc: Process, va: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            vpage, offset = (va + pos) >> PAGE_BITS, (va + pos) & (PAGE_SIZE - 1)
            n = min(len(data) - pos, PAGE_SIZE - offset)
            self.dram.write_slice(self._frame_for(proc, vpage), offset, data[pos:pos + n])
            pos += n

    def read_virtual(self, proc: Process, va: int, length: int) -> bytes:
        chunks = []
        pos = 0
        while pos < length:
            vpage, offset = (va + pos) >> PAGE_BITS, (va + pos) & (PAGE_SIZE - 1)
            n = min(length - pos, PAGE_SIZE - offset)
            chunks.append(self.dram.read_slice(self._frame_for(proc, vpage), offset, n))
            pos += n
        return b"".join(chunks)

    def dump_pages(self, pid: int):
        """Hex dump of a process's mapped pages (profiling mode only)."""
        if not self.profiling:
            raise OsError("memory dumps require profiling mode")
        proc = self.procs[pid]
        for vpage in sorted(proc.page_table):
            frame = proc.page_table[vpage]
            data = self.dram.read_page(frame)
            for line_off in range(0, PAGE_SIZE, 32):
                chunk = data[line_off:line_off + 32]
                if any(chunk):
                    yield f"{(vpage << PAGE_BITS) + line_off:016x} {chunk.hex()}"

    def minor_fault_count(self, proc: Process) -> int:
        return proc.minor_faults

    # -- signals ------------------------------------------------------------------

    def deliver_signal(self, proc: Process, sig: Signal) -> None:
        """Deliver a signal, spilling or restoring registers as the kernel would.

        A handled signal saves the full register file to the user stack for
        the handler's duration. SIGSTOP freezes the process (leaving any
        spilled registers in memory); SIGCONT restores the register file
        from memory, picking up whatever bits it holds by then.
        """
        if proc.state is ProcState.EXITED:
            raise OsError("cannot signal an exited process")
        if sig in (Signal.SIGINT, Signal.SIGUSR1):
            if sig in proc.program.handler_signals and not proc.handler_active:
                self._spill_registers(proc)
                proc.handler_active = True
        elif sig is Signal.SIGSTOP:
            proc.state = ProcState.STOPPED
        elif sig is Signal.SIGCONT:
            if proc.handler_active:
                self._restore_registers(proc)
                proc.handler_active = False
            proc.state = ProcState.RUNNING

    def signal_spill_slot(self, proc: Process, register: str) -> int:
        return proc.signal_spill_va + 8 * REGISTER_NAMES.index(register)

    def _spill_registers(self, proc: Process) -> None:
        blob = b"".join(proc.registers[r].to_bytes(8, "little") for r in REGISTER_NAMES)
        self.write_virtual(proc, proc.signal_spill_va, blob)

    def _restore_registers(self, proc: Process) -> None:
        blob = self.read_virtual(proc, proc.signal_spill_va, 8 * len(REGISTER_NAMES))
        for i, reg in enumerate(REGISTER_NAMES):
            proc.registers[reg] = int.from_bytes(blob[8 * i:8 * i + 8], "little")

    # -- blocking windows -----------------------------------------------------------

    def open_window(self, proc: Process) -> None:
        if proc.window_open:
            raise OsError("window already open")
        proc.window_open = True
        proc.window_log.append(("open", self.now))

    def close_window(self, proc: Process) -> None:
        if not proc.window_open:
            raise OsError("window not open")
        proc.window_open = False
        proc.window_log.append(("close", self.now))

    def window_timeline(self, proc: Process) -> list[tuple[str, int]]:
        return list(proc.window_log)
