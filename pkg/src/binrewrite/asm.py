"""Two-pass assembler for ZAR-32.

Used to build test fixtures and generated corpus programs.  Programs can be
built programmatically through :class:`Assembler` or from text with
:func:`assemble`::

    .text 0x1000
    main:
        MOVI r0, 65
        SYS 1
        JZ.s done        ; short form
        CALL f
    done:
        HALT
    .data 0x400000
    table: .word main, done
"""

from __future__ import annotations

import re

from .zxe import (
    DATA, FORM_LENGTH, MNEMONICS, OPCODES, SP, TEXT, EncodingError,
    Executable, Instruction, Section, encode_instruction,
)


class AsmError(ValueError):
    pass


class Assembler:
    def __init__(self):
        self.sections: list[tuple[int, int, list]] = []
        self.entry: str | int | None = None
        self._cur: list | None = None

    def section(self, kind: int, vaddr: int) -> None:
        self._cur = []
        self.sections.append((kind, vaddr, self._cur))

    def text(self, vaddr: int = 0x1000) -> None:
        self.section(TEXT, vaddr)

    def data(self, vaddr: int) -> None:
        self.section(DATA, vaddr)

    def _items(self) -> list:
        if self._cur is None:
            raise AsmError("no current section")
        return self._cur

    def label(self, name: str) -> None:
        self._items().append(("label", name))

    def ins(self, mnemonic: str, *operands) -> None:
        if mnemonic not in MNEMONICS:
            raise AsmError(f"unknown mnemonic {mnemonic!r}")
        self._items().append(("ins", MNEMONICS[mnemonic], operands))

    def raw(self, data: bytes) -> None:
        self._items().append(("raw", bytes(data)))

    def word(self, *values) -> None:
        for v in values:
            self._items().append(("word", v))

    def size_of_current(self) -> int:
        return sum(_item_size(it) for it in self._items())

    def build(self) -> tuple[Executable, dict[str, int]]:
        labels: dict[str, int] = {}
        for _, vaddr, items in self.sections:
            pc = vaddr
            for it in items:
                if it[0] == "label":
                    if it[1] in labels:
                        raise AsmError(f"duplicate label {it[1]!r}")
                    labels[it[1]] = pc
                pc += _item_size(it)

        def value(v):
            if isinstance(v, str):
                if v not in labels:
                    raise AsmError(f"undefined label {v!r}")
                return labels[v]
            return v

        sections = []
        for kind, vaddr, items in self.sections:
            out = bytearray()
            pc = vaddr
            for it in items:
                if it[0] == "ins":
                    op, operands = it[1], it[2]
                    form = OPCODES[op][1]
                    n = FORM_LENGTH[form]
                    if form in ("rel8", "rel32") and isinstance(operands[0], str):
                        ops = (value(operands[0]) - (pc + n),)
                    else:
                        ops = tuple(value(o) for o in operands)
                        if form == "ri32":
                            ops = (ops[0], ops[1] & 0xFFFFFFFF)
                    try:
                        out += encode_instruction(Instruction(op, ops))
                    except EncodingError as e:
                        raise AsmError(f"at {pc:#x}: {e}") from None
                elif it[0] == "raw":
                    out += it[1]
                elif it[0] == "word":
                    out += (value(it[1]) & 0xFFFFFFFF).to_bytes(4, "little")
                pc = vaddr + len(out)
            sections.append(Section(kind, vaddr, bytes(out)))
        text = [s for s in sections if s.kind == TEXT]
        if not text:
            raise AsmError("no text section")
        entry = value(self.entry) if self.entry is not None else text[0].vaddr
        exe = Executable(entry, sections)
        exe.validate()
        return exe, labels


def _item_size(it) -> int:
    kind = it[0]
    if kind == "ins":
        return FORM_LENGTH[OPCODES[it[1]][1]]
    if kind == "raw":
        return len(it[1])
    if kind == "word":
        return 4
    return 0


_REG = {f"r{i}": i for i in range(8)}
_REG["sp"] = SP
_MEM = re.compile(r"^\[\s*(\w+)\s*(?:([+-])\s*(\w+))?\s*\]$")


def _num_or_label(tok: str):
    tok = tok.strip()
    try:
        return int(tok, 0)
    except ValueError:
        if not re.fullmatch(r"[A-Za-z_.$][\w.$]*", tok):
            raise AsmError(f"bad operand {tok!r}") from None
        return tok


def _reg(tok: str) -> int:
    tok = tok.strip().lower()
    if tok not in _REG:
        raise AsmError(f"bad register {tok!r}")
    return _REG[tok]


def _mem(tok: str) -> tuple[int, int]:
    m = _MEM.match(tok.strip().lower())
    if not m:
        raise AsmError(f"bad memory operand {tok!r}")
    base = _reg(m.group(1))
    disp = int(m.group(3), 0) if m.group(3) else 0
    return base, -disp if m.group(2) == "-" else disp


def _split_operands(s: str) -> list[str]:
    parts, depth, cur = [], 0, ""
    for ch in s:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    if cur.strip():
        parts.append(cur)
    return [p.strip() for p in parts]


def assemble(source: str) -> tuple[Executable, dict[str, int]]:
    """Assemble text source; returns the executable and its label table."""
    a = Assembler()
    for lineno, line in enumerate(source.splitlines(), 1):
        line = re.split(r"[;#]", line, maxsplit=1)[0].strip()
        try:
            while True:
                m = re.match(r"^([A-Za-z_.$][\w.$]*):\s*", line)
                if not m:
                    break
                a.label(m.group(1))
                line = line[m.end():]
            if not line:
                continue
            head, _, rest = line.partition(" ")
            ops = _split_operands(rest)
            if head == ".text":
                a.text(int(ops[0], 0) if ops else 0x1000)
            elif head == ".data":
                a.data(int(ops[0], 0))
            elif head == ".entry":
                a.entry = _num_or_label(ops[0])
            elif head == ".word":
                a.word(*(_num_or_label(o) for o in ops))
            elif head == ".byte":
                a.raw(bytes(int(o, 0) & 0xFF for o in ops))
            elif head == ".zero":
                a.raw(bytes(int(ops[0], 0)))
            else:
                a.ins(*_parse_ins(head.upper().replace(".S", ".s"), ops))
        except (AsmError, EncodingError, IndexError, ValueError) as e:
            raise AsmError(f"line {lineno}: {e}") from None
    return a.build()


def _parse_ins(name: str, ops: list[str]) -> tuple:
    if name not in MNEMONICS:
        raise AsmError(f"unknown mnemonic {name!r}")
    form = OPCODES[MNEMONICS[name]][1]
    if form == "none":
        return (name,)
    if form in ("rr",):
        return name, _reg(ops[0]), _reg(ops[1])
    if form == "r":
        return name, _reg(ops[0])
    if form in ("ri32", "ri8"):
        return name, _reg(ops[0]), _num_or_label(ops[1])
    if form == "load":
        base, disp = _mem(ops[1])
        return name, _reg(ops[0]), base, disp
    if form == "store":
        base, disp = _mem(ops[0])
        return name, base, disp, _reg(ops[1])
    if form in ("rel8", "rel32"):
        v = _num_or_label(ops[0])
        return name, v
    return name, int(ops[0], 0)
