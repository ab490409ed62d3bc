"""Reference emulator for ZXE executables.

The emulator is the semantic oracle of the rewriter: rewritten binaries are
run side by side with their originals and must agree on output and exit
code.  It also counts executed instructions, which is the overhead metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .zxe import (
    MASK32, SP, DecodeError, Executable, Instruction, decode_instruction,
)

DEFAULT_STEP_LIMIT = 10_000_000
STACK_TOP = 0x4000_0000
EOF_VALUE = 0xFFFFFFFF


class Memory:
    """Sparse byte-addressed memory.

    Sections are backed by private bytearrays; everything else lives in a
    dict of aligned 32-bit words and reads as zero until written.
    """

    def __init__(self, exe: Executable):
        self.regions = [(s.vaddr, s.end, bytearray(s.data), s.is_text)
                        for s in exe.sections if s.data]
        self.words: dict[int, int] = {}

    def _region(self, addr, n):
        for lo, hi, buf, is_text in self.regions:
            if lo <= addr and addr + n <= hi:
                return lo, buf, is_text
        return None

    def touches_text(self, addr: int, n: int = 4) -> bool:
        for lo, hi, _, is_text in self.regions:
            if is_text and addr < hi and addr + n > lo:
                return True
        return False

    def load8(self, addr: int) -> int:
        addr &= MASK32
        r = self._region(addr, 1)
        if r:
            return r[1][addr - r[0]]
        return self.words.get(addr & ~3, 0) >> (8 * (addr & 3)) & 0xFF

    def store8(self, addr: int, value: int) -> None:
        addr &= MASK32
        r = self._region(addr, 1)
        if r:
            r[1][addr - r[0]] = value & 0xFF
            return
        base, shift = addr & ~3, 8 * (addr & 3)
        w = self.words.get(base, 0)
        self.words[base] = (w & ~(0xFF << shift)) | (value & 0xFF) << shift

    def load32(self, addr: int) -> int:
        addr &= MASK32
        if not addr & 3:
            r = self._region(addr, 4)
            if r:
                off = addr - r[0]
                return int.from_bytes(r[1][off:off + 4], "little")
            if self._region(addr, 1) is None:
                return self.words.get(addr, 0)
        return (self.load8(addr) | self.load8(addr + 1) << 8
                | self.load8(addr + 2) << 16 | self.load8(addr + 3) << 24)

    def store32(self, addr: int, value: int) -> None:
        addr &= MASK32
        value &= MASK32
        if not addr & 3:
            r = self._region(addr, 4)
            if r:
                off = addr - r[0]
                r[1][off:off + 4] = value.to_bytes(4, "little")
                return
            if self._region(addr, 1) is None and self._region(addr + 3, 1) is None:
                self.words[addr] = value
                return
        for i in range(4):
            self.store8(addr + i, value >> (8 * i))


@dataclass
class ExecutionResult:
    outcome: str                     # "exit", "trap" or "step_limit"
    code: int | None = None          # exit code (full 32-bit r0)
    reason: str | None = None        # trap reason
    output: bytes = b""
    dynamic_count: int = 0

    @property
    def observable(self) -> tuple:
        """What differential testing compares."""
        return self.outcome, self.code, self.reason, self.output

    def describe(self) -> str:
        if self.outcome == "exit":
            return f"exit({self.code})"
        if self.outcome == "trap":
            return f"trap({self.reason})"
        return "step_limit"


@dataclass
class MachineState:
    exe: Executable
    memory: Memory
    regs: list[int] = field(default_factory=lambda: [0] * 8 + [STACK_TOP])
    pc: int = 0
    z: bool = False
    n: bool = False
    input: bytes = b""
    input_pos: int = 0
    output: bytearray = field(default_factory=bytearray)
    steps: int = 0
    result: ExecutionResult | None = None
    decoded: dict[int, tuple[Instruction, int]] = field(default_factory=dict)

    @property
    def halted(self) -> bool:
        return self.result is not None

    def finish(self, outcome, code=None, reason=None, extra=0) -> None:
        self.result = ExecutionResult(outcome, code, reason, bytes(self.output),
                                      self.steps + extra)


def start(exe: Executable, input: bytes = b"") -> MachineState:
    return MachineState(exe=exe, memory=Memory(exe), pc=exe.entry, input=bytes(input))


def _signed(v):
    return v - 0x100000000 if v & 0x80000000 else v


class _Trap(Exception):
    def __init__(self, reason):
        self.reason = reason


def _fetch(state: MachineState) -> tuple[Instruction, int]:
    pc = state.pc
    hit = state.decoded.get(pc)
    if hit is not None:
        return hit
    text = state.exe.text
    if not text.contains(pc):
        raise _Trap("pc-outside-text")
    try:
        hit = decode_instruction(text.data, pc - text.vaddr)
    except DecodeError as e:
        raise _Trap("unknown-opcode" if "opcode" in e.reason else "decode-error") from None
    state.decoded[pc] = hit
    return hit


IndirectHook = Callable[[str, int, int], None]


def _execute(state: MachineState, ins: Instruction, length: int,
             on_indirect: IndirectHook | None) -> None:
    """Execute one decoded instruction; raises _Trap on faults."""
    regs = state.regs
    mem = state.memory
    op = ins.opcode
    ops = ins.operands
    nxt = (state.pc + length) & MASK32
    state.pc = nxt
    if op == 0x11:                                   # MOVI
        regs[ops[0]] = ops[1]
    elif op == 0x20:                                 # LOAD
        regs[ops[0]] = mem.load32(regs[ops[1]] + ops[2])
    elif op == 0x21:                                 # STORE
        addr = (regs[ops[0]] + ops[1]) & MASK32
        if mem.touches_text(addr):
            raise _Trap("text-write")
        mem.store32(addr, regs[ops[2]])
    elif op == 0x10:
        regs[ops[0]] = regs[ops[1]]
    elif op == 0x12:
        regs[ops[0]] = (regs[ops[0]] + regs[ops[1]]) & MASK32
    elif op == 0x13:
        regs[ops[0]] = (regs[ops[0]] - regs[ops[1]]) & MASK32
    elif op == 0x14:
        regs[ops[0]] ^= regs[ops[1]]
    elif op == 0x15:
        regs[ops[0]] &= regs[ops[1]]
    elif op == 0x16:
        regs[ops[0]] |= regs[ops[1]]
    elif op == 0x17:
        regs[ops[0]] = (regs[ops[0]] << ops[1]) & MASK32 if ops[1] < 32 else 0
    elif op == 0x18:
        regs[ops[0]] = regs[ops[0]] >> ops[1] if ops[1] < 32 else 0
    elif op == 0x19:
        regs[ops[0]] = (regs[ops[0]] + ops[1]) & MASK32
    elif op == 0x1A:
        regs[ops[0]] ^= ops[1]
    elif op == 0x30 or op == 0x31:                   # CMP / CMPI
        a = regs[ops[0]]
        b = regs[ops[1]] if op == 0x30 else ops[1]
        state.z = a == b
        state.n = _signed(a) < _signed(b)
    elif op == 0x28:                                 # PUSH
        sp = (regs[SP] - 4) & MASK32
        if mem.touches_text(sp):
            raise _Trap("text-write")
        mem.store32(sp, regs[ops[0]])
        regs[SP] = sp
    elif op == 0x29:                                 # POP
        v = mem.load32(regs[SP])
        regs[SP] = (regs[SP] + 4) & MASK32
        regs[ops[0]] = v
    elif op == 0x40 or op == 0x41:
        state.pc = (nxt + ops[0]) & MASK32
    elif 0x42 <= op <= 0x49:
        cond = (op - 0x42) & 3
        if cond == 0:
            taken = state.z
        elif cond == 1:
            taken = not state.z
        elif cond == 2:
            taken = state.n
        else:
            taken = not state.n
        if taken:
            state.pc = (nxt + ops[0]) & MASK32
    elif op == 0x50 or op == 0x51:                   # CALL / CALLR
        target = (nxt + ops[0]) & MASK32 if op == 0x50 else regs[ops[0]]
        sp = (regs[SP] - 4) & MASK32
        if mem.touches_text(sp):
            raise _Trap("text-write")
        mem.store32(sp, nxt)
        regs[SP] = sp
        if op == 0x51 and on_indirect:
            on_indirect("CALLR", nxt - length, target)
        state.pc = target
    elif op == 0x52:                                 # JMPR
        target = regs[ops[0]]
        if on_indirect:
            on_indirect("JMPR", nxt - length, target)
        state.pc = target
    elif op == 0x53:                                 # RET
        target = mem.load32(regs[SP])
        regs[SP] = (regs[SP] + 4) & MASK32
        if on_indirect:
            on_indirect("RET", nxt - length, target)
        state.pc = target
    elif op == 0x60:                                 # SYS
        _syscall(state, ops[0])
    elif op == 0x00:                                 # HALT
        state.finish("exit", regs[0], extra=1)
    elif op == 0x01:
        pass
    else:  # pragma: no cover - decoder rejects unknown opcodes
        raise _Trap("unknown-opcode")


def _syscall(state: MachineState, num: int) -> None:
    regs = state.regs
    if num == 0:
        state.finish("exit", regs[0], extra=1)
    elif num == 1:
        state.output.append(regs[0] & 0xFF)
    elif num == 2:
        if state.input_pos < len(state.input):
            regs[0] = state.input[state.input_pos]
            state.input_pos += 1
        else:
            regs[0] = EOF_VALUE
    elif num == 3:
        state.output += str(_signed(regs[0])).encode()
    else:
        raise _Trap("bad-syscall")


def step(state: MachineState, on_indirect: IndirectHook | None = None) -> MachineState:
    """Execute exactly one instruction in place and return the state."""
    if state.halted:
        raise RuntimeError("machine already stopped")
    try:
        ins, length = _fetch(state)
        _execute(state, ins, length, on_indirect)
        state.steps += 1
    except _Trap as t:
        state.finish("trap", reason=t.reason)
    return state


def execute(exe: Executable, input: bytes = b"", step_limit: int = DEFAULT_STEP_LIMIT,
            on_indirect: IndirectHook | None = None) -> MachineState:
    """Run to completion and return the final machine state (memory included)."""
    if step_limit < 1:
        raise ValueError("step_limit must be >= 1")
    state = start(exe, input)
    while state.result is None:
        if state.steps >= step_limit:
            state.finish("step_limit")
            break
        try:
            ins, length = _fetch(state)
            _execute(state, ins, length, on_indirect)
            state.steps += 1
        except _Trap as t:
            state.finish("trap", reason=t.reason)
    return state


def run(exe: Executable, input: bytes = b"", step_limit: int = DEFAULT_STEP_LIMIT,
        on_indirect: IndirectHook | None = None) -> ExecutionResult:
    return execute(exe, input, step_limit, on_indirect).result
