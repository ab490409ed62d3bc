"""The IR database.

Instructions are stored as records linked to each other by identity rather
than by address, so transforms can insert, move and rewrite code freely.
Original addresses survive only as provenance and as pins: addresses that
must keep their meaning in the rewritten binary because something may reach
them indirectly.

On disk the IR is a line-oriented text file (see ``docs/irdb-format.md``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable

from .zxe import (
    CALL, CALLR, CONDITIONAL, HALT, JMPR, RET, UNCONDITIONAL_JUMP,
    Instruction, decode_instruction, encode_instruction,
)

FORMAT_HEADER = "IRDB v1"

DATA_TO_INSTRUCTION = "data_to_instruction"
IMM_TO_INSTRUCTION = "instr_imm_to_instruction"


class IRError(ValueError):
    pass


@dataclass
class InstructionRecord:
    id: int
    instr: Instruction
    original_address: int | None = None
    target_id: int | None = None
    fallthrough_id: int | None = None
    pinned_at: int | None = None
    function_id: int | None = None
    origin: str | None = None  # name of the transform that inserted it

    @property
    def opcode(self) -> int:
        return self.instr.opcode


@dataclass
class FunctionRecord:
    id: int
    head: int
    members: set[int] = field(default_factory=set)
    name: str | None = None


@dataclass(frozen=True)
class Relocation:
    kind: str
    site_kind: str        # "data" (DataObject id) or "record" (InstructionRecord id)
    site_id: int
    offset: int
    referent: int


@dataclass
class DataObject:
    id: int
    vaddr: int
    data: bytes
    relocs: list[Relocation] = field(default_factory=list)
    origin: str | None = None

    @property
    def end(self) -> int:
        return self.vaddr + len(self.data)


@dataclass
class ProgramIR:
    records: dict[int, InstructionRecord] = field(default_factory=dict)
    functions: dict[int, FunctionRecord] = field(default_factory=dict)
    data_objects: dict[int, DataObject] = field(default_factory=dict)
    relocs: list[Relocation] = field(default_factory=list)   # instruction sites
    pins: dict[int, int] = field(default_factory=dict)       # address -> record id
    entry_record: int | None = None
    entry_address: int = 0
    text_base: int = 0
    text_size: int = 0
    blobs: list[tuple[int, bytes]] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)
    next_id: int = 1

    def new_id(self) -> int:
        i = self.next_id
        self.next_id += 1
        return i

    def add_record(self, instr: Instruction, **kw) -> InstructionRecord:
        rec = InstructionRecord(self.new_id(), instr, **kw)
        self.records[rec.id] = rec
        return rec

    def pin(self, rid: int, addr: int) -> None:
        self.records[rid].pinned_at = addr
        self.pins[addr] = rid

    def all_relocations(self) -> list[Relocation]:
        out = list(self.relocs)
        for d in self.data_objects.values():
            out.extend(d.relocs)
        return out

    def applied_transforms(self) -> list[str]:
        t = self.metadata.get("transforms", "")
        return t.split("+") if t else []

    def functions_of(self, rid: int) -> list[FunctionRecord]:
        return [f for f in self.functions.values() if rid in f.members]

    def insert_before(self, rid: int, items: list, origin: str | None = None) -> int:
        """Insert instructions so they run before record ``rid``.

        Every existing reference to ``rid`` (branches, fallthroughs, pins,
        function heads, relocation referents) now reaches the first inserted
        instruction.  The original instruction moves to a fresh record, whose
        id is returned.

        ``items`` holds ``Instruction`` objects or ``(Instruction, target)``
        pairs; ``target`` is an index into ``items`` (``len(items)`` means the
        original instruction) or ``("record", id)``.
        """
        if not items:
            return rid
        x = self.records[rid]
        moved = InstructionRecord(
            self.new_id(), x.instr, x.original_address, x.target_id,
            x.fallthrough_id, None, x.function_id, x.origin)
        self.records[moved.id] = moved
        ids = [rid] + [self.new_id() for _ in items[1:]]
        ids.append(moved.id)
        for i, item in enumerate(items):
            instr, target = item if isinstance(item, tuple) else (item, None)
            if isinstance(target, int):
                tid = ids[target]
            elif isinstance(target, tuple):
                tid = target[1]
            else:
                tid = None
            has_ft = instr.opcode not in (RET, HALT, JMPR) and instr.opcode not in UNCONDITIONAL_JUMP
            fields = dict(instr=instr, original_address=None, target_id=tid,
                          fallthrough_id=ids[i + 1] if has_ft else None,
                          function_id=x.function_id, origin=origin)
            if i == 0:
                for k, v in fields.items():
                    setattr(x, k, v)
            else:
                self.records[ids[i]] = InstructionRecord(ids[i], **fields)
        for j, r in enumerate(self.relocs):
            if r.site_kind == "record" and r.site_id == rid:
                self.relocs[j] = Relocation(r.kind, "record", moved.id, r.offset, r.referent)
        for f in self.functions.values():
            if rid in f.members:
                f.members.update(ids)
        return moved.id


# ---------------------------------------------------------------------------
# Validation

@dataclass(frozen=True)
class Violation:
    code: str
    message: str
    records: tuple[int, ...] = ()

    def __str__(self):
        ids = ",".join(map(str, self.records))
        return f"{self.code}: {self.message}" + (f" [{ids}]" if ids else "")


def link_shape(opcode: int) -> tuple[bool, bool]:
    """(needs target, needs fallthrough) for an opcode."""
    if opcode in UNCONDITIONAL_JUMP:
        return True, False
    if opcode in (RET, HALT, JMPR):
        return False, False
    if opcode == CALL or opcode in CONDITIONAL:
        return True, True
    return False, True


def intra_successors(rec: InstructionRecord) -> list[int]:
    """Successors within a function: no CALL edges, CALL falls through."""
    out = []
    if rec.target_id is not None and rec.opcode != CALL:
        out.append(rec.target_id)
    if rec.fallthrough_id is not None:
        out.append(rec.fallthrough_id)
    return out


def validate_ir(ir: ProgramIR) -> list[Violation]:
    v: list[Violation] = []
    recs = ir.records
    for rec in recs.values():
        need_t, need_f = link_shape(rec.opcode)
        name = rec.instr.mnemonic
        if need_t and rec.target_id is None:
            v.append(Violation("missing-target", f"{name} has no target", (rec.id,)))
        if not need_t and rec.target_id is not None:
            v.append(Violation("unexpected-target", f"{name} must not have a target", (rec.id,)))
        if need_f and rec.fallthrough_id is None:
            v.append(Violation("missing-fallthrough", f"{name} has no fallthrough", (rec.id,)))
        if not need_f and rec.fallthrough_id is not None:
            v.append(Violation("unexpected-fallthrough", f"{name} must not fall through", (rec.id,)))
        for kind, link in (("target", rec.target_id), ("fallthrough", rec.fallthrough_id)):
            if link is not None and link not in recs:
                v.append(Violation("dangling-link", f"{kind} {link} does not exist", (rec.id,)))
        if rec.function_id is not None and rec.function_id not in ir.functions:
            v.append(Violation("dangling-function", f"function {rec.function_id} does not exist", (rec.id,)))
        if rec.pinned_at is not None and ir.pins.get(rec.pinned_at) != rec.id:
            v.append(Violation("pin-mismatch", f"record pinned at {rec.pinned_at:#x} not in pin table", (rec.id,)))
        if rec.opcode in (CALL, CALLR) and rec.fallthrough_id in recs:
            ft = recs[rec.fallthrough_id]
            if ft.pinned_at is None:
                v.append(Violation("unpinned-return", "call return point is not pinned", (rec.id, ft.id)))

    seen: dict[int, int] = {}
    for rec in recs.values():
        if rec.pinned_at is not None:
            if rec.pinned_at in seen:
                v.append(Violation("duplicate-pin", f"two records pinned at {rec.pinned_at:#x}",
                                   (seen[rec.pinned_at], rec.id)))
            else:
                seen[rec.pinned_at] = rec.id
    for addr, rid in ir.pins.items():
        if rid not in recs:
            v.append(Violation("dangling-pin", f"pin {addr:#x} refers to missing record {rid}", (rid,)))
        elif recs[rid].pinned_at != addr:
            v.append(Violation("pin-mismatch", f"pin {addr:#x} not recorded on its record", (rid,)))

    if ir.entry_record not in recs:
        v.append(Violation("bad-entry", "entry record missing"))
    elif recs[ir.entry_record].pinned_at != ir.entry_address:
        v.append(Violation("bad-entry", "entry record is not pinned at the entry address",
                           (ir.entry_record,)))

    for f in ir.functions.values():
        if f.head not in f.members:
            v.append(Violation("function-head", f"function {f.id} head not a member", (f.head,)))
            continue
        missing = [m for m in f.members if m not in recs]
        if missing:
            v.append(Violation("dangling-member", f"function {f.id} has missing members", tuple(missing)))
            continue
        reached = {f.head}
        work = [f.head]
        while work:
            for s in intra_successors(recs[work.pop()]):
                if s in f.members and s not in reached:
                    reached.add(s)
                    work.append(s)
        if reached != f.members:
            v.append(Violation("function-disconnected",
                               f"function {f.id} members unreachable from head",
                               tuple(sorted(f.members - reached))))

    for d in ir.data_objects.values():
        for r in d.relocs:
            if r.site_kind != "data" or r.site_id != d.id:
                v.append(Violation("bad-reloc", f"relocation site mismatch in data object {d.id}"))
            if not 0 <= r.offset <= len(d.data) - 4:
                v.append(Violation("bad-reloc", f"relocation offset {r.offset} outside data object {d.id}"))
    for r in ir.all_relocations():
        if r.referent not in recs:
            v.append(Violation("dangling-reloc", f"relocation referent {r.referent} missing"))
        if r.site_kind == "record":
            site = recs.get(r.site_id)
            if site is None:
                v.append(Violation("dangling-reloc", f"relocation site {r.site_id} missing"))
            elif not 0 <= r.offset <= site.instr.length - 4:
                v.append(Violation("bad-reloc", "relocation offset outside instruction", (site.id,)))
    return v


# ---------------------------------------------------------------------------
# Persistence

def _opt(v, hexaddr=False):
    if v is None:
        return "-"
    return f"{v:#x}" if hexaddr else str(v)


def _parse_opt(s, base=10):
    return None if s == "-" else int(s, 0 if base == 16 else 10)


def dumps_ir(ir: ProgramIR) -> str:
    lines = [FORMAT_HEADER]
    for k in sorted(ir.metadata):
        lines.append(f"meta {k} {ir.metadata[k]}")
    lines.append(f"text {ir.text_base:#x} {ir.text_size}")
    lines.append(f"entry {ir.entry_record} {ir.entry_address:#x}")
    lines.append(f"nextid {ir.next_id}")
    for rid in sorted(ir.records):
        r = ir.records[rid]
        lines.append(
            f"rec {r.id} {encode_instruction(r.instr).hex()} orig={_opt(r.original_address, True)} "
            f"tgt={_opt(r.target_id)} ft={_opt(r.fallthrough_id)} pin={_opt(r.pinned_at, True)} "
            f"fn={_opt(r.function_id)} origin={r.origin or '-'}")
    for fid in sorted(ir.functions):
        f = ir.functions[fid]
        members = ",".join(map(str, sorted(f.members)))
        lines.append(f"func {f.id} head={f.head} name={f.name or '-'} members={members}")
    for did in sorted(ir.data_objects):
        d = ir.data_objects[did]
        lines.append(f"data {d.id} {d.vaddr:#x} origin={d.origin or '-'} {d.data.hex() or '-'}")
    for r in sorted(ir.all_relocations(), key=lambda r: (r.site_kind, r.site_id, r.offset, r.kind)):
        lines.append(f"reloc {r.kind} {r.site_kind}:{r.site_id}+{r.offset} {r.referent}")
    for addr, blob in sorted(ir.blobs):
        lines.append(f"blob {addr:#x} {blob.hex()}")
    return "\n".join(lines) + "\n"


def _kv(tokens: Iterable[str]) -> dict[str, str]:
    out = {}
    for t in tokens:
        k, _, val = t.partition("=")
        out[k] = val
    return out


def loads_ir(text: str) -> ProgramIR:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise IRError(f"version mismatch: expected header {FORMAT_HEADER!r}")
    ir = ProgramIR()
    relocs = []
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        tag, *rest = line.split(" ")
        try:
            if tag == "meta":
                ir.metadata[rest[0]] = " ".join(rest[1:])
            elif tag == "text":
                ir.text_base, ir.text_size = int(rest[0], 0), int(rest[1])
            elif tag == "entry":
                ir.entry_record, ir.entry_address = int(rest[0]), int(rest[1], 0)
            elif tag == "nextid":
                ir.next_id = int(rest[0])
            elif tag == "rec":
                rid = int(rest[0])
                raw = bytes.fromhex(rest[1])
                instr, length = decode_instruction(raw, 0)
                if length != len(raw):
                    raise IRError("instruction bytes have trailing data")
                kv = _kv(rest[2:])
                if rid in ir.records:
                    raise IRError(f"duplicate record id {rid}")
                rec = InstructionRecord(
                    rid, instr, _parse_opt(kv["orig"], 16), _parse_opt(kv["tgt"]),
                    _parse_opt(kv["ft"]), _parse_opt(kv["pin"], 16), _parse_opt(kv["fn"]),
                    None if kv["origin"] == "-" else kv["origin"])
                ir.records[rid] = rec
                if rec.pinned_at is not None:
                    if rec.pinned_at in ir.pins:
                        raise IRError(f"duplicate pin {rec.pinned_at:#x}")
                    ir.pins[rec.pinned_at] = rid
            elif tag == "func":
                kv = _kv(rest[1:])
                members = {int(x) for x in kv["members"].split(",") if x}
                ir.functions[int(rest[0])] = FunctionRecord(
                    int(rest[0]), int(kv["head"]), members,
                    None if kv["name"] == "-" else kv["name"])
            elif tag == "data":
                did = int(rest[0])
                origin = _kv([rest[2]])["origin"]
                ir.data_objects[did] = DataObject(
                    did, int(rest[1], 0), b"" if rest[3] == "-" else bytes.fromhex(rest[3]),
                    origin=None if origin == "-" else origin)
            elif tag == "reloc":
                site, _, off = rest[1].partition("+")
                sk, _, sid = site.partition(":")
                relocs.append(Relocation(rest[0], sk, int(sid), int(off), int(rest[2])))
            elif tag == "blob":
                ir.blobs.append((int(rest[0], 0), bytes.fromhex(rest[1])))
            else:
                raise IRError(f"unknown line tag {tag!r}")
        except (IndexError, KeyError, ValueError) as e:
            if isinstance(e, IRError):
                raise IRError(f"line {n}: {e}") from None
            raise IRError(f"line {n}: malformed {tag} line ({e})") from None
    for r in relocs:
        if r.site_kind == "data":
            if r.site_id not in ir.data_objects:
                raise IRError(f"dangling reference: relocation site data {r.site_id}")
            ir.data_objects[r.site_id].relocs.append(r)
        else:
            ir.relocs.append(r)
    _check_references(ir)
    return ir


def _check_references(ir: ProgramIR) -> None:
    recs = ir.records
    for r in recs.values():
        for link in (r.target_id, r.fallthrough_id):
            if link is not None and link not in recs:
                raise IRError(f"dangling reference: record {r.id} links to {link}")
        if r.function_id is not None and r.function_id not in ir.functions:
            raise IRError(f"dangling reference: record {r.id} function {r.function_id}")
    if ir.entry_record not in recs:
        raise IRError(f"dangling reference: entry record {ir.entry_record}")
    for f in ir.functions.values():
        for m in f.members | {f.head}:
            if m not in recs:
                raise IRError(f"dangling reference: function {f.id} member {m}")
    for r in ir.all_relocations():
        if r.referent not in recs:
            raise IRError(f"dangling reference: relocation referent {r.referent}")
        if r.site_kind == "record" and r.site_id not in recs:
            raise IRError(f"dangling reference: relocation site {r.site_id}")


def save_ir(ir: ProgramIR, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(dumps_ir(ir))


def load_ir(path) -> ProgramIR:
    with open(path, encoding="ascii") as f:
        return loads_ir(f.read())


def ir_digest(ir: ProgramIR) -> str:
    return hashlib.sha256(dumps_ir(ir).encode()).hexdigest()


# ---------------------------------------------------------------------------
# Structural isomorphism (identity renaming allowed)

def _record_key(r: InstructionRecord):
    return (encode_instruction(r.instr), r.original_address, r.pinned_at, r.origin,
            r.target_id is None, r.fallthrough_id is None)


def isomorphic(a: ProgramIR, b: ProgramIR) -> bool:
    """True when ``a`` and ``b`` differ only by a renaming of identities."""
    if len(a.records) != len(b.records) or len(a.functions) != len(b.functions):
        return False
    if (a.text_base, a.text_size, a.entry_address) != (b.text_base, b.text_size, b.entry_address):
        return False
    if sorted(a.pins) != sorted(b.pins) or sorted(a.blobs) != sorted(b.blobs):
        return False
    mapping: dict[int, int] = {}
    work: list[tuple[int, int]] = []

    def bind(x, y):
        if x is None or y is None:
            return x is None and y is None
        if x in mapping:
            return mapping[x] == y
        if _record_key(a.records[x]) != _record_key(b.records[y]):
            return False
        mapping[x] = y
        work.append((x, y))
        return True

    roots = [(a.entry_record, b.entry_record)]
    roots += [(a.pins[p], b.pins[p]) for p in sorted(a.pins)]
    by_addr_b = {r.original_address: r.id for r in b.records.values() if r.original_address is not None}
    roots += [(r.id, by_addr_b.get(r.original_address)) for r in
              sorted(a.records.values(), key=lambda r: (r.original_address is None, r.original_address or 0))
              if r.original_address is not None]
    for x, y in roots:
        if not bind(x, y):
            return False
        while work:
            x1, y1 = work.pop()
            ra, rb = a.records[x1], b.records[y1]
            if not bind(ra.target_id, rb.target_id) or not bind(ra.fallthrough_id, rb.fallthrough_id):
                return False
    if len(mapping) != len(a.records) or len(set(mapping.values())) != len(mapping):
        return False
    fa = {(mapping[f.head], frozenset(mapping[m] for m in f.members), f.name) for f in a.functions.values()}
    fb = {(f.head, frozenset(f.members), f.name) for f in b.functions.values()}
    if fa != fb:
        return False
    ra = sorted((r.kind, r.site_kind, r.offset, mapping[r.referent],
                 mapping[r.site_id] if r.site_kind == "record" else a.data_objects[r.site_id].vaddr)
                for r in a.all_relocations())
    rb = sorted((r.kind, r.site_kind, r.offset, r.referent,
                 r.site_id if r.site_kind == "record" else b.data_objects[r.site_id].vaddr)
                for r in b.all_relocations())
    da = sorted((d.vaddr, d.data) for d in a.data_objects.values())
    db = sorted((d.vaddr, d.data) for d in b.data_objects.values())
    return ra == rb and da == db
