"""Lift a ZXE executable into the IR.

Two disassemblers run over the text section and their results are unioned:
a linear sweep from the start of text and a recursive traversal from the
entry point and every address-taken code location.  Decodings that overlap
each other are all kept; at run time only the correct one ever executes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from . import irdb
from .irdb import DataObject, FunctionRecord, ProgramIR, Relocation
from .zxe import (
    CALL, CALLR, RELATIVE, TERMINATORS, DecodeError,
    Executable, Instruction, decode_instruction,
)


@dataclass
class InterpretationSet:
    """Every decoded instruction start in text, plus undecodable byte runs."""

    text_base: int
    text_size: int
    instructions: dict[int, tuple[Instruction, int]] = field(default_factory=dict)
    linear: set[int] = field(default_factory=set)
    recursive: set[int] = field(default_factory=set)
    blobs: list[tuple[int, bytes]] = field(default_factory=list)

    def contains(self, addr: int) -> bool:
        return self.text_base <= addr < self.text_base + self.text_size

    def overlaps(self) -> list[tuple[int, int]]:
        """Pairs of decoded starts whose byte ranges intersect."""
        out = []
        starts = sorted(self.instructions)
        for i, a in enumerate(starts):
            end = a + self.instructions[a][1]
            for b in starts[i + 1:]:
                if b >= end:
                    break
                out.append((a, b))
        return out


def _successors(addr: int, ins: Instruction, length: int) -> list[int]:
    out = []
    if ins.opcode in RELATIVE:
        out.append((addr + length + ins.displacement) & 0xFFFFFFFF)
    if ins.opcode not in TERMINATORS:
        out.append(addr + length)
    return out


def _decode_at(text, base, addr):
    try:
        return decode_instruction(text, addr - base)
    except DecodeError:
        return None


def data_code_words(exe: Executable) -> set[int]:
    """Text addresses named by 4-byte data words, scanned at every byte offset."""
    text = exe.text
    out = set()
    for s in exe.data_sections:
        d = s.data
        for off in range(len(d) - 3):
            v = int.from_bytes(d[off:off + 4], "little")
            if text.contains(v):
                out.add(v)
    return out


def disassemble_union(exe: Executable) -> InterpretationSet:
    text = exe.text
    base, data = text.vaddr, text.data
    interp = InterpretationSet(base, len(data))
    found = interp.instructions

    # linear sweep; undecodable bytes are skipped one at a time
    off = 0
    while off < len(data):
        try:
            ins, n = decode_instruction(data, off)
        except DecodeError:
            off += 1
            continue
        found[base + off] = (ins, n)
        interp.linear.add(base + off)
        off += n

    # recursive traversal; MOVI immediates found along the way become seeds
    work = [exe.entry] + sorted(data_code_words(exe))
    for a, (ins, _) in list(found.items()):
        if ins.mnemonic == "MOVI" and text.contains(ins.operands[1]):
            work.append(ins.operands[1])
    seen = set()
    while work:
        addr = work.pop()
        if addr in seen or not text.contains(addr):
            continue
        seen.add(addr)
        hit = found.get(addr) or _decode_at(data, base, addr)
        if hit is None:
            continue
        ins, n = hit
        found[addr] = hit
        interp.recursive.add(addr)
        work.extend(_successors(addr, ins, n))
        if ins.mnemonic == "MOVI" and text.contains(ins.operands[1]):
            work.append(ins.operands[1])

    covered = bytearray(len(data))
    for a, (_, n) in found.items():
        covered[a - base:a - base + n] = b"\x01" * n
    run_start = None
    for i in range(len(data) + 1):
        if i < len(data) and not covered[i]:
            if run_start is None:
                run_start = i
        elif run_start is not None:
            interp.blobs.append((base + run_start, bytes(data[run_start:i])))
            run_start = None
    return interp


def _prune(interp: InterpretationSet) -> dict[int, tuple[Instruction, int]]:
    """Drop decodings whose successors are not decoded instruction starts.

    Such decodings only arise from data or junk bytes; dropping them cascades
    to whatever falls through into them.
    """
    live = dict(interp.instructions)
    preds: dict[int, list[int]] = {}
    for a, (ins, n) in live.items():
        for s in _successors(a, ins, n):
            preds.setdefault(s, []).append(a)
    bad = [a for a, (ins, n) in live.items()
           if any(s not in live for s in _successors(a, ins, n))]
    while bad:
        a = bad.pop()
        if a not in live:
            continue
        del live[a]
        bad.extend(p for p in preds.get(a, ()) if p in live)
    return live


def find_pins(exe: Executable, interp: InterpretationSet,
              decoded: dict[int, tuple[Instruction, int]] | None = None) -> set[int]:
    """Indirect branch targets: entry, address-taken code, return addresses."""
    decoded = interp.instructions if decoded is None else decoded
    pins = {exe.entry}
    pins.update(a for a in data_code_words(exe) if a in decoded)
    for a, (ins, n) in decoded.items():
        if ins.mnemonic == "MOVI" and ins.operands[1] in decoded:
            pins.add(ins.operands[1])
        if ins.opcode in (CALL, CALLR):
            pins.add(a + n)
    return {p for p in pins if p in decoded}


def discover_functions(ir: ProgramIR) -> None:
    """Heads are the entry and every CALL target; bodies stop at RET/HALT.

    A record reachable from several heads belongs to each of those functions;
    ``function_id`` points at the first one.
    """
    heads = {ir.entry_record}
    for r in ir.records.values():
        if r.opcode == CALL:
            heads.add(r.target_id)
    recs = ir.records
    for head in sorted(heads, key=lambda h: (recs[h].original_address or 0, h)):
        members = {head}
        work = [head]
        while work:
            for s in irdb.intra_successors(recs[work.pop()]):
                if s not in members:
                    members.add(s)
                    work.append(s)
        fid = ir.new_id()
        addr = recs[head].original_address
        name = "main" if head == ir.entry_record else f"f_{addr:x}"
        ir.functions[fid] = FunctionRecord(fid, head, members, name)
        for m in members:
            if recs[m].function_id is None:
                recs[m].function_id = fid


def lift(exe: Executable, source: str = "", seed: int | None = None) -> ProgramIR:
    exe.validate()
    interp = disassemble_union(exe)
    decoded = _prune(interp)
    if exe.entry not in decoded:
        raise irdb.IRError(f"entry {exe.entry:#x} does not start a valid instruction stream")
    pins = find_pins(exe, interp, decoded)
    text = exe.text

    ir = ProgramIR(text_base=text.vaddr, text_size=len(text.data), entry_address=exe.entry)
    ir.metadata["source"] = source or "-"
    ir.metadata["lifted"] = str(int(time.time()))
    if seed is not None:
        ir.metadata["seed"] = str(seed)
    by_addr: dict[int, int] = {}
    for a in sorted(decoded):
        ins, _ = decoded[a]
        by_addr[a] = ir.add_record(ins, original_address=a).id
    for a, rid in by_addr.items():
        ins, n = decoded[a]
        rec = ir.records[rid]
        if ins.opcode in RELATIVE:
            rec.target_id = by_addr[(a + n + ins.displacement) & 0xFFFFFFFF]
        if ins.opcode not in TERMINATORS:
            rec.fallthrough_id = by_addr[a + n]
    for p in sorted(pins):
        ir.pin(by_addr[p], p)
    ir.entry_record = by_addr[exe.entry]

    # blobs: bytes no surviving decoding covers
    covered = bytearray(len(text.data))
    for a, (_, n) in decoded.items():
        covered[a - text.vaddr:a - text.vaddr + n] = b"\x01" * n
    start = None
    for i in range(len(text.data) + 1):
        if i < len(text.data) and not covered[i]:
            if start is None:
                start = i
        elif start is not None:
            ir.blobs.append((text.vaddr + start, bytes(text.data[start:i])))
            start = None

    for s in exe.data_sections:
        d = DataObject(ir.new_id(), s.vaddr, bytes(s.data))
        for off in range(len(s.data) - 3):
            v = int.from_bytes(s.data[off:off + 4], "little")
            if v in ir.pins:
                d.relocs.append(Relocation(irdb.DATA_TO_INSTRUCTION, "data", d.id, off, ir.pins[v]))
        ir.data_objects[d.id] = d
    for a, rid in by_addr.items():
        ins = ir.records[rid].instr
        if ins.mnemonic == "MOVI" and ins.operands[1] in ir.pins:
            ir.relocs.append(Relocation(irdb.IMM_TO_INSTRUCTION, "record", rid, 2,
                                        ir.pins[ins.operands[1]]))
    discover_functions(ir)
    return ir
