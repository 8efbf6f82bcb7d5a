"""Modeled victim programs: security variables, checks, and their lifecycle.

A gadget program is a small deterministic state machine over one or more
security variables, not compiled code. Compiler behavior that matters to the
attack (where a variable lives, when a register gets pushed to the stack) is
encoded declaratively per variable, which makes calling-convention effects
testable without a real toolchain.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .dram import PAGE_SIZE
from .osmodel import Machine, Process, Signal

PRESET_NAMES = (
    "sudo", "openssh-authenticated", "openssh-result", "openssl-ret",
    "mysql", "bellcore-bnzero", "tls-client-stack", "tls-client-register",
)


class VictimError(Exception):
    pass


class AuthOutcome(enum.Enum):
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"
    CRASH = "CRASH"


@dataclass(frozen=True)
class Check:
    """Comparison gating the success path."""

    op: str  # "!=" or "=="
    value: int

    def passes(self, value: int) -> bool:
        return value != self.value if self.op == "!=" else value == self.value


@dataclass(frozen=True)
class SecurityVar:
    """A security-critical variable and where it lives.

    ``offset_from_top`` positions the variable (or, for register storage,
    its spill slot) relative to the stack top; its low 4 bits become the
    variable's constant in-page nibble. ``success_value`` is what an honest
    run writes when the credential is correct.
    """

    name: str
    width_bits: int = 32
    storage: str = "stack"  # "stack" or "register"
    register: str | None = None
    offset_from_top: int = 0x158
    init_value: int = 0
    check: Check = Check("!=", 0)
    success_value: int = 1

    def __post_init__(self):
        if self.storage not in ("stack", "register"):
            raise VictimError(f"unknown storage class {self.storage!r}")
        if self.storage == "register" and not self.register:
            raise VictimError("register storage needs a register name")
        if self.check.passes(self.init_value):
            raise VictimError(
                f"{self.name}: init value must fail the check for an honest run")
        if not self.check.passes(self.success_value):
            raise VictimError(f"{self.name}: success value must pass the check")

    @property
    def width_bytes(self) -> int:
        return max(1, (self.width_bits + 7) // 8)

    @property
    def mask(self) -> int:
        return (1 << self.width_bits) - 1

    @property
    def nibble(self) -> int:
        return (-self.offset_from_top) % 16


@dataclass(frozen=True)
class GadgetProgram:
    """Declarative victim: variables, layout, and synchronization behavior.

    ``sync`` selects how an attacker can align hammering with the vulnerable
    interval: ``"window"`` programs block on an external event between
    variable setup and the check; ``"sigstop"`` programs run straight
    through and can only be frozen by signals. ``assign_phase`` says when
    the credential result is written: ``"pre"`` before the vulnerable
    interval, ``"post_success"`` after it and only on a correct credential.
    """

    name: str
    variables: tuple[SecurityVar, ...]
    target: str
    sync: str = "sigstop"           # "sigstop" or "window"
    assign_phase: str = "pre"       # "pre" or "post_success"
    window_kind: str | None = None
    text_pages: int = 3
    data_pages: int = 2
    filler_frames: int = 16
    stack_pages: int = 3
    handler_signals: frozenset = frozenset({Signal.SIGINT})
    fault_profile: tuple[int, int, int, int] = (200, 800, 275, 286)
    lifecycle: tuple[str, ...] = ("init", "blocking-wait", "check", "exit")
    crash_region: tuple[int, int] | None = None

    def __post_init__(self):
        names = [v.name for v in self.variables]
        if self.target not in names:
            raise VictimError(f"target {self.target!r} is not a declared variable")
        if self.sync not in ("sigstop", "window"):
            raise VictimError(f"unknown sync mode {self.sync!r}")
        if self.assign_phase not in ("pre", "post_success"):
            raise VictimError(f"unknown assign phase {self.assign_phase!r}")
        if self.sync == "sigstop" and self.assign_phase != "pre":
            raise VictimError("sigstop programs assign before the check")
        expected = ("init", "blocking-wait", "check", "exit")
        if tuple(self.lifecycle) != expected:
            raise VictimError("lifecycle phases out of order")

    def target_var(self) -> SecurityVar:
        return next(v for v in self.variables if v.name == self.target)


def preset(name: str) -> GadgetProgram:
    """Return one of the shipped victim programs by name."""
    if name not in PRESET_NAMES:
        raise VictimError(f"unknown preset {name!r}; know {', '.join(PRESET_NAMES)}")
    builder = _PRESETS[name]
    return builder()


def _sigstop_program(name: str, var: SecurityVar, filler: int,
                     text: int = 3, data: int = 2) -> GadgetProgram:
    return GadgetProgram(
        name=name, variables=(var,), target=var.name, sync="sigstop",
        assign_phase="pre", text_pages=text, data_pages=data,
        filler_frames=filler, stack_pages=3)


_PRESETS = {
    "sudo": lambda: _sigstop_program(
        "sudo",
        SecurityVar("matched", 32, "stack", None, 0x158, 0, Check("!=", 0), 1),
        filler=37),
    "openssh-authenticated": lambda: _sigstop_program(
        "openssh-authenticated",
        SecurityVar("authenticated", 32, "stack", None, 0x168, 0, Check("==", 1), 1),
        filler=52, text=4),
    "openssh-result": lambda: _sigstop_program(
        "openssh-result",
        SecurityVar("result", 32, "stack", None, 0x148, 0, Check("!=", 0), 1),
        filler=52, text=4),
    "openssl-ret": lambda: _sigstop_program(
        "openssl-ret",
        SecurityVar("ret", 32, "stack", None, 0x138, 0, Check("!=", 0), 1),
        filler=41),
    "mysql": lambda: _sigstop_program(
        "mysql",
        SecurityVar("fast_auth_first", 1, "stack", None, 0x128, 0, Check("==", 1), 1),
        filler=64, text=5, data=3),
    "bellcore-bnzero": lambda: GadgetProgram(
        name="bellcore-bnzero",
        variables=(SecurityVar("zerocheck", 32, "register", "rax", 0x118,
                               0, Check("!=", 0), 1),),
        target="zerocheck", sync="window", assign_phase="pre",
        window_kind="halt", filler_frames=23, stack_pages=3),
    "tls-client-stack": lambda: GadgetProgram(
        name="tls-client-stack",
        variables=(SecurityVar("pass", 32, "stack", None, 0x158,
                               0, Check("!=", 0), 1),),
        target="pass", sync="window", assign_phase="post_success",
        window_kind="socket", text_pages=2, data_pages=1,
        filler_frames=12, stack_pages=2),
    "tls-client-register": lambda: GadgetProgram(
        name="tls-client-register",
        variables=(SecurityVar("pass", 32, "register", "rbx", 0x158,
                               0, Check("!=", 0), 1),),
        target="pass", sync="window", assign_phase="post_success",
        window_kind="socket", text_pages=2, data_pages=1,
        filler_frames=12, stack_pages=2),
}


# -- lifecycle execution ---------------------------------------------------------


class VictimSession:
    """Drives one victim run, interleavable with attacker actions.

    ``launch`` advances the victim to its vulnerable interval (window open,
    or past credential assignment for sigstop programs). The attacker then
    acts; ``interrupt`` models the SIGSTOP synchronization attempt, and
    ``finish`` completes the run and yields the outcome. Residency intervals
    for every variable are recorded on the process for soundness checks.
    """

    def __init__(self, machine: Machine, program: GadgetProgram,
                 credential_correct: bool, aslr: bool = True,
                 placement_noise: float = 0.0):
        self.machine = machine
        self.program = program
        self.credential_correct = credential_correct
        self.aslr = aslr
        self.placement_noise = placement_noise
        self.proc: Process | None = None
        self.outcome: AuthOutcome | None = None
        self._stopped = False

    # -- phases --

    def launch(self) -> Process:
        self.proc = self.machine.spawn(self.program, aslr=self.aslr,
                                       placement_noise=self.placement_noise)
        for var in self.program.variables:
            self._write_var(var, var.init_value)
        if self.program.sync == "window":
            if self.program.assign_phase == "pre":
                self._apply_credential()
            self.machine.open_window(self.proc)
            for var in self.program.variables:
                if var.storage == "register":
                    self._spill_to_stack(var)
        else:
            self._apply_credential()
        return self.proc

    def interrupt(self, stop_hits: bool) -> None:
        """Attacker's SIGSTOP attempt. A miss means the check already ran."""
        if self.program.sync != "sigstop":
            raise VictimError("interrupt only applies to sigstop-synchronized programs")
        if stop_hits:
            self.machine.deliver_signal(self.proc, Signal.SIGINT)
            self.machine.deliver_signal(self.proc, Signal.SIGSTOP)
            self._stopped = True
        else:
            self._evaluate()

    def finish(self) -> AuthOutcome:
        if self.program.sync == "window":
            for var in self.program.variables:
                if var.storage == "register":
                    self._restore_from_stack(var)
            self.machine.close_window(self.proc)
            if self.program.assign_phase == "post_success" and self.credential_correct:
                self._apply_credential()
            self._evaluate()
        else:
            if self._stopped:
                self.machine.deliver_signal(self.proc, Signal.SIGCONT)
                self._stopped = False
            if self.outcome is None:
                self._evaluate()
        return self.outcome

    def run(self) -> AuthOutcome:
        """Honest end-to-end run with no attacker interleaving."""
        self.launch()
        return self.finish()

    # -- variable plumbing --

    def _apply_credential(self) -> None:
        for var in self.program.variables:
            value = var.success_value if self.credential_correct else var.init_value
            self._write_var(var, value)

    def _write_var(self, var: SecurityVar, value: int) -> None:
        proc = self.proc
        if var.storage == "register":
            proc.registers[var.register] = value & var.mask
            return
        self._end_residency(var.name)
        self.machine.write_virtual(proc, proc.var_va[var.name],
                                   (value & var.mask).to_bytes(var.width_bytes, "little"))
        self._start_residency(var)

    def _read_var(self, var: SecurityVar) -> int:
        proc = self.proc
        if var.storage == "register":
            return proc.registers[var.register] & var.mask
        raw = self.machine.read_virtual(proc, proc.var_va[var.name], var.width_bytes)
        self._end_residency(var.name)
        return int.from_bytes(raw, "little") & var.mask

    def _spill_to_stack(self, var: SecurityVar) -> None:
        proc = self.proc
        value = proc.registers[var.register]
        self.machine.write_virtual(proc, proc.var_va[var.name],
                                   value.to_bytes(8, "little"))
        self._start_residency(var)

    def _restore_from_stack(self, var: SecurityVar) -> None:
        proc = self.proc
        raw = self.machine.read_virtual(proc, proc.var_va[var.name], 8)
        proc.registers[var.register] = int.from_bytes(raw, "little")
        self._end_residency(var.name)

    def _start_residency(self, var: SecurityVar) -> None:
        from .osmodel import Residency
        proc = self.proc
        va = proc.var_va[var.name]
        frame = proc.page_table[va >> 12]
        bit_lo = (va & (PAGE_SIZE - 1)) * 8
        proc.residency.setdefault(var.name, []).append(Residency(
            frame=frame, bit_lo=bit_lo, bit_hi=bit_lo + var.width_bits,
            start=self.machine.now))

    def _end_residency(self, name: str) -> None:
        spans = self.proc.residency.get(name)
        if spans and spans[-1].end is None:
            spans[-1].end = self.machine.now

    # -- outcome --

    def _evaluate(self) -> None:
        proc = self.proc
        if self.program.crash_region is not None:
            off, length = self.program.crash_region
            lo = (proc.stack_top - off) & (PAGE_SIZE - 1)
            frame = proc.page_table[proc.var_va[self.program.target] >> 12]
            for event in self.machine.dram.flip_log:
                if event.frame == frame and lo * 8 <= event.page_bit < (lo + length) * 8:
                    self.outcome = AuthOutcome.CRASH
                    return
        passed = all(var.check.passes(self._read_var(var))
                     for var in self.program.variables)
        self.outcome = AuthOutcome.SUCCESS if passed else AuthOutcome.FAILURE


def run(machine: Machine, program: GadgetProgram, credential_correct: bool,
        aslr: bool = True, placement_noise: float = 0.0) -> AuthOutcome:
    """Honest run of a program; SUCCESS iff the credential is correct."""
    session = VictimSession(machine, program, credential_correct,
                            aslr=aslr, placement_noise=placement_noise)
    outcome = session.run()
    machine.exit(session.proc)
    return outcome


# -- declarative program files --------------------------------------------------

_SIGNAL_NAMES = {s.value: s for s in Signal}


def save_program(program: GadgetProgram, path) -> None:
    """Write a program as a declarative scenario file."""
    lines = [
        f"name {program.name}",
        f"sync {program.sync}",
        f"assign {program.assign_phase}",
        f"window {program.window_kind or '-'}",
        f"text_pages {program.text_pages}",
        f"data_pages {program.data_pages}",
        f"filler_frames {program.filler_frames}",
        f"stack_pages {program.stack_pages}",
        f"target {program.target}",
        "fault_profile " + " ".join(str(x) for x in program.fault_profile),
        "handlers " + (" ".join(sorted(s.value for s in program.handler_signals)) or "-"),
    ]
    for v in program.variables:
        lines.append(
            f"var {v.name} width {v.width_bits} storage {v.storage} "
            f"register {v.register or '-'} offset {v.offset_from_top:#x} "
            f"init {v.init_value} check {v.check.op}{v.check.value} "
            f"success {v.success_value}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_program(path) -> GadgetProgram:
    """Parse a declarative scenario file back into a program."""
    fields: dict[str, str] = {}
    variables: list[SecurityVar] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key == "var":
                try:
                    variables.append(_parse_var(rest))
                except (ValueError, IndexError) as exc:
                    raise VictimError(f"bad var record at line {lineno}: {exc}") from None
            else:
                fields[key] = rest
    try:
        handlers = frozenset(
            _SIGNAL_NAMES[tok] for tok in fields.get("handlers", "-").split()
            if tok != "-")
        fp = tuple(int(x) for x in fields["fault_profile"].split())
        return GadgetProgram(
            name=fields["name"], variables=tuple(variables),
            target=fields["target"], sync=fields["sync"],
            assign_phase=fields["assign"],
            window_kind=None if fields["window"] == "-" else fields["window"],
            text_pages=int(fields["text_pages"]),
            data_pages=int(fields["data_pages"]),
            filler_frames=int(fields["filler_frames"]),
            stack_pages=int(fields["stack_pages"]),
            handler_signals=handlers, fault_profile=fp)
    except KeyError as exc:
        raise VictimError(f"missing field in program file: {exc}") from None


def _parse_var(rest: str) -> SecurityVar:
    toks = rest.split()
    name = toks[0]
    kv = dict(zip(toks[1::2], toks[2::2]))
    check_tok = kv["check"]
    op = check_tok[:2]
    if op not in ("!=", "=="):
        raise ValueError(f"bad check token {check_tok!r}")
    return SecurityVar(
        name=name,
        width_bits=int(kv["width"]),
        storage=kv["storage"],
        register=None if kv["register"] == "-" else kv["register"],
        offset_from_top=int(kv["offset"], 0),
        init_value=int(kv["init"]),
        check=Check(op, int(check_tok[2:], 0)),
        success_value=int(kv["success"]),
    )
