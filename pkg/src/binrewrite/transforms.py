"""IR-to-IR transforms and the registry that sequences them.

Every transform takes a ProgramIR plus parsed integer options and edits it in
place; ``apply_transforms`` works on a copy, so callers see a pure function.
Inserted records carry an ``origin`` tag naming the transform that made them,
which later transforms use to find each other's code.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field
from typing import Callable

from . import analyses
from .irdb import DataObject, ProgramIR, validate_ir
from .zxe import CALL, RET, SP, Instruction

I = Instruction.of

STAMP_ENTER = "stack_stamp:enter"
STAMP_LEAVE = "stack_stamp:leave"
CFI_FAIL_CODE = 139


class TransformError(Exception):
    pass


class TransformValidationError(TransformError):
    """A transform produced an IR that fails validation."""


@dataclass
class TransformSpec:
    name: str
    options: dict[str, str] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "TransformSpec":
        """``name`` or ``name:key=value,key=value``."""
        name, _, rest = text.partition(":")
        opts = {}
        for part in filter(None, rest.split(",")):
            k, eq, v = part.partition("=")
            if not eq or not k:
                raise TransformError(f"malformed option {part!r} for {name}")
            opts[k.strip()] = v.strip()
        return cls(name.strip(), opts)

    def __str__(self):
        if not self.options:
            return self.name
        return self.name + ":" + ",".join(f"{k}={v}" for k, v in sorted(self.options.items()))


@dataclass
class Registered:
    func: Callable
    defaults: dict[str, int]
    doc: str


REGISTRY: dict[str, Registered] = {}


def register(name: str, **defaults):
    def deco(func):
        REGISTRY[name] = Registered(func, defaults, (func.__doc__ or "").strip())
        return func
    return deco


def parse_options(spec: TransformSpec) -> dict[str, int]:
    reg = REGISTRY[spec.name]
    opts = dict(reg.defaults)
    for k, v in spec.options.items():
        if k not in reg.defaults:
            raise TransformError(f"{spec.name}: unknown option {k!r} "
                                 f"(accepted: {', '.join(sorted(reg.defaults)) or 'none'})")
        try:
            opts[k] = int(v, 0)
        except ValueError:
            raise TransformError(f"{spec.name}: option {k}={v!r} is not an integer") from None
    return opts


def apply_transforms(ir: ProgramIR, specs) -> ProgramIR:
    specs = [TransformSpec.parse(s) if isinstance(s, str) else s for s in specs]
    for s in specs:
        if s.name not in REGISTRY:
            raise TransformError(f"unknown transform {s.name!r}; registered: "
                                 f"{', '.join(sorted(REGISTRY))}")
    parsed = [(s, parse_options(s)) for s in specs]
    history = list(ir.applied_transforms())
    for s, _ in parsed:
        if s.name == "stack_stamp" and "p1_pad" in history:
            raise TransformError("stack_stamp must run before p1_pad")
        history.append(s.name)
    before = validate_ir(ir)
    if before:
        raise TransformValidationError(f"input IR does not validate: {before[0]}")
    out = copy.deepcopy(ir)
    for s, opts in parsed:
        REGISTRY[s.name].func(out, **opts)
        problems = validate_ir(out)
        if problems:
            detail = "; ".join(map(str, problems[:5]))
            raise TransformValidationError(f"{s.name} produced an invalid IR: {detail}")
        done = out.metadata.get("transforms")
        out.metadata["transforms"] = f"{done}+{s.name}" if done else s.name
    return out


# ---------------------------------------------------------------------------
# Helpers

def _ft_preds(ir: ProgramIR) -> dict[int, list[int]]:
    preds: dict[int, list[int]] = {}
    for r in ir.records.values():
        if r.fallthrough_id is not None:
            preds.setdefault(r.fallthrough_id, []).append(r.id)
    return preds


def _entry_function(ir: ProgramIR):
    for f in ir.functions.values():
        if f.head == ir.entry_record:
            return f.id
    return None


def _branch_targets(ir: ProgramIR) -> set[int]:
    return {r.target_id for r in ir.records.values()
            if r.target_id is not None and r.opcode != CALL}


def _prologue_safe(ir: ProgramIR, f, preds, targeted) -> str | None:
    """Why a function cannot take prologue/epilogue code, or None."""
    if preds.get(f.head):
        return "head has a fallthrough predecessor"
    if f.head in targeted:
        return "head is a branch target"
    for rid in f.members:
        if ir.records[rid].opcode == RET and len(ir.functions_of(rid)) > 1:
            return "return shared with another function"
    return None


def _rets(ir: ProgramIR, f) -> list[int]:
    return sorted(rid for rid in f.members if ir.records[rid].opcode == RET)


def _report(ir: ProgramIR, key: str, skipped: list[str]) -> None:
    if skipped:
        ir.metadata[key] = ",".join(skipped)
    else:
        ir.metadata.pop(key, None)


def _check_region(ir: ProgramIR, base: int, size: int, what: str) -> None:
    end = base + size
    if base < ir.text_base + ir.text_size and ir.text_base < end:
        raise TransformError(f"{what} at {base:#x} collides with text")
    for d in ir.data_objects.values():
        if base < d.end and d.vaddr < end:
            raise TransformError(f"{what} at {base:#x} collides with data at {d.vaddr:#x}")


def _spill_skip(ir: ProgramIR) -> int:
    return 4 * (analyses.sp_frame_words(ir, ir.records) + 1)


def _scratch(dead: frozenset, skip: int, avoid=()) -> tuple[list, list, list[int]]:
    """Two scratch registers plus the code that frees them if they are live.

    Spills move sp below the deepest frame slot any function uses, so pushes
    never land on unprotected locals.
    """
    usable = sorted(r for r in dead if r not in avoid and r != SP)
    if len(usable) >= 2:
        return [], [], usable[:2]
    regs = [r for r in range(8) if r not in avoid][:2]
    pre = [I("ADDI", SP, -skip & 0xFFFFFFFF), I("PUSH", regs[0]), I("PUSH", regs[1])]
    post = [I("POP", regs[1]), I("POP", regs[0]), I("ADDI", SP, skip)]
    return pre, post, regs


# ---------------------------------------------------------------------------
# Transforms

@register("initialize_stack", frame_probe=16)
def t_initialize_stack(ir: ProgramIR, frame_probe: int) -> None:
    """Zero each function's frame slots below sp on entry."""
    dead = analyses.program_dead_registers(ir)
    for fid in sorted(ir.functions):
        f = ir.functions[fid]
        words = min(analyses.sp_frame_words(ir, f.members), frame_probe)
        if words <= 0:
            continue
        free = sorted(r for r in dead.get(f.head, ()) if r != SP)
        if free:
            z = free[0]
            code = [I("MOVI", z, 0)] + [I("STORE", SP, -4 * k, z) for k in range(1, words + 1)]
        else:
            # no dead register: borrow r0 via a slot just past the frame
            spill = -4 * (words + 1)
            code = ([I("STORE", SP, spill, 0), I("MOVI", 0, 0)]
                    + [I("STORE", SP, -4 * k, 0) for k in range(1, words + 1)]
                    + [I("LOAD", 0, SP, spill)])
        ir.insert_before(f.head, code, origin="initialize_stack")


@register("kill_deads", value=0xDEADDEAD)
def t_kill_deads(ir: ProgramIR, value: int) -> None:
    """Overwrite every dead register before every instruction."""
    dead = analyses.program_dead_registers(ir)
    value &= 0xFFFFFFFF
    for rid in sorted(dead):
        regs = sorted(dead[rid] - {SP})
        if regs:
            ir.insert_before(rid, [I("MOVI", r, value) for r in regs], origin="kill_deads")


def _stamp_code(key: int) -> list[Instruction]:
    return [I("PUSH", 0), I("LOAD", 0, SP, 4), I("XORI", 0, key),
            I("STORE", SP, 4, 0), I("POP", 0)]


@register("stack_stamp", seed=0, key=-1)
def t_stack_stamp(ir: ProgramIR, seed: int, key: int) -> None:
    """XOR the saved return address with a per-binary key for a function's lifetime."""
    k = random.Random(seed).getrandbits(32) if key < 0 else key & 0xFFFFFFFF
    ir.metadata["stack_stamp.key"] = f"{k:#x}"
    preds = _ft_preds(ir)
    targeted = _branch_targets(ir)
    entry_fn = _entry_function(ir)
    skipped = []
    for fid in sorted(ir.functions):
        f = ir.functions[fid]
        if fid == entry_fn:
            continue
        why = _prologue_safe(ir, f, preds, targeted)
        if why:
            skipped.append(f"{f.name or fid}({why})")
            continue
        for rid in _rets(ir, f):
            ir.insert_before(rid, _stamp_code(k), origin=STAMP_LEAVE)
        ir.insert_before(f.head, _stamp_code(k), origin=STAMP_ENTER)
    _report(ir, "stack_stamp.skipped", skipped)


@register("p1_pad", seed=0, max_pad=64)
def t_p1_pad(ir: ProgramIR, seed: int, max_pad: int) -> None:
    """Give every function a random amount of extra stack."""
    if max_pad < 4:
        raise TransformError("p1_pad: max_pad must be at least 4")
    rng = random.Random(seed)
    preds = _ft_preds(ir)
    targeted = _branch_targets(ir)
    recs = ir.records
    skipped, pads, plan = [], [], []
    for fid in sorted(ir.functions):
        f = ir.functions[fid]
        pad = 4 * rng.randint(1, max_pad // 4)
        why = _prologue_safe(ir, f, preds, targeted)
        if why is None and analyses.positive_sp_access(ir, f.members):
            why = "positive sp offset"
        if why:
            skipped.append(f"{f.name or fid}({why})")
            continue
        pads.append(f"{f.name or fid}={pad}")
        plan.append((f, pad))

    for f, pad in plan:
        # after any stamp prologue at the head
        cur, spot = recs[f.head], f.head
        while cur.origin is not None and cur.origin != STAMP_LEAVE and cur.fallthrough_id is not None:
            nxt = cur.fallthrough_id
            if cur.origin == STAMP_ENTER:
                spot = nxt
            cur = recs[nxt]
        ir.insert_before(spot, [I("ADDI", SP, -pad & 0xFFFFFFFF)], origin="p1_pad")

    preds = _ft_preds(ir)
    for f, pad in plan:
        for rid in _rets(ir, f):
            # before any stamp epilogue in front of the return
            spot, cur = rid, rid
            while True:
                p = preds.get(cur, [])
                if len(p) != 1 or recs[p[0]].origin is None or recs[p[0]].origin == STAMP_ENTER:
                    break
                cur = p[0]
                if recs[cur].origin == STAMP_LEAVE:
                    spot = cur
            ir.insert_before(spot, [I("ADDI", SP, pad)], origin="p1_pad")
    ir.metadata["p1_pad.pads"] = ",".join(pads) or "-"
    _report(ir, "p1_pad.skipped", skipped)


@register("coverage", map_base=0x2000_0000, map_size=65536, seed=0)
def t_coverage(ir: ProgramIR, map_base: int, map_size: int, seed: int) -> None:
    """Edge-coverage counters in the style of AFL, one site per basic block."""
    if map_size <= 0 or map_size & (map_size - 1):
        raise TransformError("coverage: map_size must be a power of two")
    nbytes = 4 * map_size + 4
    _check_region(ir, map_base, nbytes, "coverage map")
    prev_addr = map_base + 4 * map_size
    did = ir.new_id()
    ir.data_objects[did] = DataObject(did, map_base, bytes(nbytes), origin="coverage")
    skip = _spill_skip(ir)
    dead = analyses.program_dead_registers(ir)
    heads = set()
    for fid in sorted(ir.functions):
        cfg = analyses.build_cfg(ir, ir.functions[fid])
        heads.update(b.head for b in cfg.blocks)
    rng = random.Random(seed)
    ids = {}
    for rid in sorted(heads):
        ids[rid] = rng.randrange(map_size)
    ir.metadata["coverage.blocks"] = str(len(ids))
    ir.metadata["coverage.ids"] = ",".join(f"{rid}:{ids[rid]}" for rid in sorted(ids))
    for rid in sorted(ids):
        cur = ids[rid]
        pre, post, (a, b) = _scratch(dead.get(rid, frozenset()), skip)
        body = [
            I("MOVI", a, prev_addr),
            I("LOAD", b, a, 0),
            I("XORI", b, cur),
            I("SHL", b, 2),
            I("ADDI", b, map_base),
            I("LOAD", a, b, 0),
            I("ADDI", a, 1),
            I("STORE", b, 0, a),
            I("MOVI", a, prev_addr),
            I("MOVI", b, cur >> 1),
            I("STORE", a, 0, b),
        ]
        ir.insert_before(rid, pre + body + post, origin="coverage")


def constant_target(ir: ProgramIR, rid: int, preds=None) -> int | None:
    """Pinned address an indirect branch always uses, if provable.

    Walks backwards from the branch: every path must reach the same MOVI of
    a pinned address into the target register without passing a function
    entry, a pinned record (enterable from anywhere) or another write.
    """
    recs = ir.records
    if preds is None:
        preds = _all_preds(ir)
    site = recs[rid]
    reg = site.instr.operands[0]
    heads = {f.head for f in ir.functions.values()}
    defs = set()
    seen = set()
    work = [rid]
    while work:
        cur = work.pop()
        if cur in seen:
            continue
        seen.add(cur)
        if recs[cur].pinned_at is not None or cur in heads or not preds.get(cur):
            return None
        for p in preds[cur]:
            pr = recs[p]
            _, writes = analyses.reads_writes(pr)
            if pr.opcode == CALL and reg in analyses.ARG_REGS:
                return None     # callee may clobber it
            if reg in writes:
                ins = pr.instr
                if ins.mnemonic != "MOVI" or ins.operands[1] not in ir.pins:
                    return None
                defs.add(p)
            else:
                work.append(p)
    if len(defs) != 1:
        return None
    return recs[defs.pop()].instr.operands[1]


def _all_preds(ir: ProgramIR) -> dict[int, list[int]]:
    preds: dict[int, list[int]] = {}
    for r in ir.records.values():
        for s in (r.target_id, r.fallthrough_id):
            if s is not None:
                preds.setdefault(s, []).append(r.id)
    return preds


@register("selective_cfi", table_base=0x3000_0000)
def t_selective_cfi(ir: ProgramIR, table_base: int) -> None:
    """Check indirect branch targets against the pin table unless provably constant."""
    table = sorted(ir.pins)
    _check_region(ir, table_base, 4 * len(table), "CFI table")
    did = ir.new_id()
    ir.data_objects[did] = DataObject(did, table_base, b"".join(
        a.to_bytes(4, "little") for a in table), origin="selective_cfi")
    table_end = table_base + 4 * len(table)
    preds = _all_preds(ir)
    skip = _spill_skip(ir)
    sites = sorted(r.id for r in ir.records.values() if r.instr.mnemonic in ("CALLR", "JMPR"))
    checked = elided = 0
    for rid in sites:
        if constant_target(ir, rid, preds) is not None:
            elided += 1
            continue
        checked += 1
        t = ir.records[rid].instr.operands[0]
        pre, post, (a, b) = _scratch(frozenset(), skip, avoid=(t,))
        n = len(pre)
        fail = n + 8
        ok = n + 10
        check = [
            I("MOVI", a, table_base),                     # n
            I("LOAD", b, a, 0),                           # n+1 loop
            I("CMP", b, t),
            (I("JZ", 0), ok),
            (I("JGE", 0), fail),                          # sorted: passed the target
            I("ADDI", a, 4),
            I("CMPI", a, table_end),
            (I("JNZ", 0), n + 1),
            I("MOVI", 0, CFI_FAIL_CODE),                  # n+8 fail
            I("SYS", 0),
        ]
        ir.insert_before(rid, pre + check + post, origin="selective_cfi")
    ir.metadata["selective_cfi.sites"] = f"checked={checked},elided={elided}"


def describe() -> str:
    lines = []
    for name in sorted(REGISTRY):
        reg = REGISTRY[name]
        opts = ", ".join(f"{k}={v:#x}" if v > 4096 else f"{k}={v}"
                         for k, v in sorted(reg.defaults.items()))
        lines.append(f"{name}: {reg.doc} [{opts or 'no options'}]")
    return "\n".join(lines)

