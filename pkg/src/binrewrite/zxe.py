"""ZAR-32 instruction set and the ZXE executable container.

ZAR-32 is a small variable-length ISA (1 to 6 bytes per instruction) with
nine registers: r0..r7 and sp (index 8).  All multi-byte fields are
little-endian.  Branch displacements are relative to the address of the
next instruction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

SP = 8
NUM_REGS = 9
MASK32 = 0xFFFFFFFF


class EncodingError(ValueError):
    pass


class DecodeError(ValueError):
    def __init__(self, reason: str, offset: int):
        super().__init__(f"{reason} at {offset:#x}")
        self.reason = reason
        self.offset = offset


class FormatError(ValueError):
    pass


# Operand layouts.  Each form fixes the total length of the instruction.
#   none  : op
#   rr    : op, reg byte (dst<<4 | src)
#   r     : op, reg byte (reg in low nibble)
#   ri32  : op, reg byte (reg in low nibble), imm32
#   ri8   : op, reg byte (reg in low nibble), imm8
#   load  : op, reg byte (dst<<4 | base), disp16     LOAD rd, [rs+disp]
#   store : op, reg byte (base<<4 | src), disp16     STORE [rd+disp], rs
#   rel8  : op, rel8
#   rel32 : op, rel32
#   i8    : op, imm8
FORM_LENGTH = {
    "none": 1, "rr": 2, "r": 2, "ri32": 6, "ri8": 3, "load": 4,
    "store": 4, "rel8": 2, "rel32": 5, "i8": 2,
}

OPCODES: dict[int, tuple[str, str]] = {
    0x00: ("HALT", "none"),
    0x01: ("NOP", "none"),
    0x10: ("MOV", "rr"),
    0x11: ("MOVI", "ri32"),
    0x12: ("ADD", "rr"),
    0x13: ("SUB", "rr"),
    0x14: ("XOR", "rr"),
    0x15: ("AND", "rr"),
    0x16: ("OR", "rr"),
    0x17: ("SHL", "ri8"),
    0x18: ("SHR", "ri8"),
    0x19: ("ADDI", "ri32"),
    0x1A: ("XORI", "ri32"),
    0x20: ("LOAD", "load"),
    0x21: ("STORE", "store"),
    0x28: ("PUSH", "r"),
    0x29: ("POP", "r"),
    0x30: ("CMP", "rr"),
    0x31: ("CMPI", "ri32"),
    0x40: ("JMP.s", "rel8"),
    0x41: ("JMP", "rel32"),
    0x42: ("JZ.s", "rel8"),
    0x43: ("JNZ.s", "rel8"),
    0x44: ("JLT.s", "rel8"),
    0x45: ("JGE.s", "rel8"),
    0x46: ("JZ", "rel32"),
    0x47: ("JNZ", "rel32"),
    0x48: ("JLT", "rel32"),
    0x49: ("JGE", "rel32"),
    0x50: ("CALL", "rel32"),
    0x51: ("CALLR", "r"),
    0x52: ("JMPR", "r"),
    0x53: ("RET", "none"),
    0x60: ("SYS", "i8"),
}

MNEMONICS = {name: op for op, (name, _) in OPCODES.items()}

# rel8 opcode -> equivalent rel32 opcode
LONG_FORM = {0x40: 0x41, 0x42: 0x46, 0x43: 0x47, 0x44: 0x48, 0x45: 0x49}

JMP8, JMP32, CALL, CALLR, JMPR, RET, HALT = 0x40, 0x41, 0x50, 0x51, 0x52, 0x53, 0x00
CONDITIONAL = frozenset({0x42, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49})
UNCONDITIONAL_JUMP = frozenset({0x40, 0x41})
RELATIVE = CONDITIONAL | UNCONDITIONAL_JUMP | {CALL}
# no fallthrough successor
TERMINATORS = frozenset({0x40, 0x41, JMPR, RET, HALT})


def reg_name(r: int) -> str:
    return "sp" if r == SP else f"r{r}"


def _s8(v):
    return v - 0x100 if v & 0x80 else v


def _s16(v):
    return v - 0x10000 if v & 0x8000 else v


def _s32(v):
    return v - 0x100000000 if v & 0x80000000 else v


@dataclass(frozen=True)
class Instruction:
    """A decoded instruction.

    ``operands`` follow the assembly order of the mnemonic: registers as
    indices, imm32 as unsigned 32-bit, imm8 as 0..255, disp16/rel8/rel32 as
    signed integers.
    """

    opcode: int
    operands: tuple[int, ...] = ()

    @classmethod
    def of(cls, mnemonic: str, *operands: int) -> "Instruction":
        try:
            op = MNEMONICS[mnemonic]
        except KeyError:
            raise EncodingError(f"unknown mnemonic {mnemonic!r}") from None
        return cls(op, tuple(operands))

    @property
    def mnemonic(self) -> str:
        return OPCODES[self.opcode][0]

    @property
    def form(self) -> str:
        return OPCODES[self.opcode][1]

    @property
    def length(self) -> int:
        return FORM_LENGTH[self.form]

    @property
    def is_branch(self) -> bool:
        return self.opcode in RELATIVE

    @property
    def displacement(self) -> int:
        return self.operands[0]

    def with_displacement(self, disp: int) -> "Instruction":
        return Instruction(self.opcode, (disp,))

    def long_form(self) -> "Instruction":
        if self.opcode in LONG_FORM:
            return Instruction(LONG_FORM[self.opcode], self.operands)
        return self

    def __str__(self) -> str:
        return format_instruction(self)


def format_instruction(ins: Instruction) -> str:
    name, form = OPCODES[ins.opcode]
    ops = ins.operands
    if form == "none":
        return name
    if form in ("rr",):
        return f"{name} {reg_name(ops[0])}, {reg_name(ops[1])}"
    if form == "r":
        return f"{name} {reg_name(ops[0])}"
    if form == "ri32":
        return f"{name} {reg_name(ops[0])}, {ops[1]:#x}"
    if form == "ri8":
        return f"{name} {reg_name(ops[0])}, {ops[1]}"
    if form == "load":
        return f"{name} {reg_name(ops[0])}, [{reg_name(ops[1])}{ops[2]:+d}]"
    if form == "store":
        return f"{name} [{reg_name(ops[0])}{ops[1]:+d}], {reg_name(ops[2])}"
    if form in ("rel8", "rel32"):
        return f"{name} {ops[0]:+d}"
    return f"{name} {ops[0]}"


_ARITY = {"none": 0, "rr": 2, "r": 1, "ri32": 2, "ri8": 2, "load": 3,
          "store": 3, "rel8": 1, "rel32": 1, "i8": 1}


def _check_reg(name, r):
    if not isinstance(r, int) or not 0 <= r < NUM_REGS:
        raise EncodingError(f"{name}: bad register operand {r!r}")


def _check_range(name, v, lo, hi, what):
    if not isinstance(v, int) or not lo <= v <= hi:
        raise EncodingError(f"{name}: {what} out of range: {v!r}")


def encode_instruction(ins: Instruction) -> bytes:
    if ins.opcode not in OPCODES:
        raise EncodingError(f"unknown opcode {ins.opcode:#x}")
    name, form = OPCODES[ins.opcode]
    ops = ins.operands
    if len(ops) != _ARITY[form]:
        raise EncodingError(f"{name}: expected {_ARITY[form]} operands, got {len(ops)}")
    op = ins.opcode
    if form == "none":
        return bytes((op,))
    if form == "rr":
        _check_reg(name, ops[0]); _check_reg(name, ops[1])
        return bytes((op, ops[0] << 4 | ops[1]))
    if form == "r":
        _check_reg(name, ops[0])
        return bytes((op, ops[0]))
    if form == "ri32":
        _check_reg(name, ops[0])
        _check_range(name, ops[1], 0, MASK32, "imm32")
        return struct.pack("<BBI", op, ops[0], ops[1])
    if form == "ri8":
        _check_reg(name, ops[0])
        _check_range(name, ops[1], 0, 0xFF, "imm8")
        return bytes((op, ops[0], ops[1]))
    if form == "load":
        _check_reg(name, ops[0]); _check_reg(name, ops[1])
        _check_range(name, ops[2], -0x8000, 0x7FFF, "disp16")
        return struct.pack("<BBh", op, ops[0] << 4 | ops[1], ops[2])
    if form == "store":
        _check_reg(name, ops[0]); _check_reg(name, ops[2])
        _check_range(name, ops[1], -0x8000, 0x7FFF, "disp16")
        return struct.pack("<BBh", op, ops[0] << 4 | ops[2], ops[1])
    if form == "rel8":
        _check_range(name, ops[0], -0x80, 0x7F, "rel8")
        return struct.pack("<Bb", op, ops[0])
    if form == "rel32":
        _check_range(name, ops[0], -0x80000000, 0x7FFFFFFF, "rel32")
        return struct.pack("<Bi", op, ops[0])
    _check_range(name, ops[0], 0, 0xFF, "imm8")
    return bytes((op, ops[0]))


def decode_instruction(data, offset: int = 0) -> tuple[Instruction, int]:
    """Decode one instruction at ``offset``; returns ``(instruction, length)``."""
    if not 0 <= offset < len(data):
        raise DecodeError("offset outside buffer", offset)
    op = data[offset]
    entry = OPCODES.get(op)
    if entry is None:
        raise DecodeError(f"unknown opcode {op:#04x}", offset)
    form = entry[1]
    n = FORM_LENGTH[form]
    if offset + n > len(data):
        raise DecodeError("truncated instruction", offset)
    if form == "none":
        return Instruction(op), 1
    b = data[offset + 1]
    if form in ("rr", "load", "store"):
        hi, lo = b >> 4, b & 0xF
        if hi > SP or lo > SP:
            raise DecodeError("bad register nibble", offset)
        if form == "rr":
            return Instruction(op, (hi, lo)), n
        disp = _s16(data[offset + 2] | data[offset + 3] << 8)
        if form == "load":
            return Instruction(op, (hi, lo, disp)), n
        return Instruction(op, (hi, disp, lo)), n
    if form in ("r", "ri32", "ri8"):
        if b > SP:
            raise DecodeError("bad register nibble", offset)
        if form == "r":
            return Instruction(op, (b,)), n
        if form == "ri8":
            return Instruction(op, (b, data[offset + 2])), n
        imm = int.from_bytes(data[offset + 2:offset + 6], "little")
        return Instruction(op, (b, imm)), n
    if form == "rel8":
        return Instruction(op, (_s8(b),)), n
    if form == "rel32":
        return Instruction(op, (_s32(int.from_bytes(data[offset + 1:offset + 5], "little")),)), n
    return Instruction(op, (b,)), n


# ---------------------------------------------------------------------------
# Container

TEXT, DATA = 1, 2
MAGIC = b"ZXE1"
VERSION = 1
_HEADER = struct.Struct("<4sHHII")
_SECTION = struct.Struct("<BBHII")


@dataclass
class Section:
    kind: int
    vaddr: int
    data: bytes = b""

    @property
    def end(self) -> int:
        return self.vaddr + len(self.data)

    @property
    def is_text(self) -> bool:
        return self.kind == TEXT

    def contains(self, addr: int) -> bool:
        return self.vaddr <= addr < self.end


@dataclass
class Executable:
    entry: int
    sections: list[Section] = field(default_factory=list)

    @property
    def text(self) -> Section:
        for s in self.sections:
            if s.kind == TEXT:
                return s
        raise FormatError("no text section")

    @property
    def data_sections(self) -> list[Section]:
        return [s for s in self.sections if s.kind == DATA]

    def validate(self) -> None:
        texts = [s for s in self.sections if s.kind == TEXT]
        if len(texts) != 1:
            raise FormatError(f"expected exactly one text section, found {len(texts)}")
        spans = sorted((s.vaddr, s.end) for s in self.sections if s.data)
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise FormatError(f"overlapping sections at {a0:#x} and {b0:#x}")
        for s in self.sections:
            if s.kind not in (TEXT, DATA):
                raise FormatError(f"bad section kind {s.kind}")
            if s.end > 1 << 32:
                raise FormatError(f"section at {s.vaddr:#x} exceeds address space")
        if not texts[0].contains(self.entry):
            raise FormatError(f"entry {self.entry:#x} outside text")


def save_executable(exe: Executable) -> bytes:
    exe.validate()
    out = [_HEADER.pack(MAGIC, VERSION, 0, exe.entry, len(exe.sections))]
    for s in exe.sections:
        out.append(_SECTION.pack(s.kind, 0, 0, s.vaddr, len(s.data)))
        out.append(bytes(s.data))
    return b"".join(out)


def load_executable(blob: bytes) -> Executable:
    if len(blob) < _HEADER.size:
        raise FormatError("file too short")
    magic, version, reserved, entry, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION or reserved != 0:
        raise FormatError(f"unsupported version {version}")
    pos = _HEADER.size
    sections = []
    for _ in range(count):
        if pos + _SECTION.size > len(blob):
            raise FormatError("truncated section table")
        kind, flags, pad, vaddr, size = _SECTION.unpack_from(blob, pos)
        if flags or pad:
            raise FormatError("nonzero section flags")
        pos += _SECTION.size
        if pos + size > len(blob):
            raise FormatError("truncated section contents")
        sections.append(Section(kind, vaddr, bytes(blob[pos:pos + size])))
        pos += size
    if pos != len(blob):
        raise FormatError("trailing bytes after last section")
    exe = Executable(entry, sections)
    exe.validate()
    return exe


def read_executable(path) -> Executable:
    with open(path, "rb") as f:
        return load_executable(f.read())


def write_executable(exe: Executable, path) -> None:
    with open(path, "wb") as f:
        f.write(save_executable(exe))
