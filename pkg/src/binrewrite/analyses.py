"""Analyses over the IR: CFGs, dominators, call graph, dead registers, loops."""

from __future__ import annotations

from dataclasses import dataclass, field

from .irdb import FunctionRecord, InstructionRecord, ProgramIR
from .zxe import CALL, CALLR, CONDITIONAL, HALT, JMPR, RET, SP, UNCONDITIONAL_JUMP

ALL_REGS = frozenset(range(9))
GPRS = frozenset(range(8))
ARG_REGS = frozenset(range(4))


@dataclass
class Block:
    index: int
    records: list[int]

    @property
    def head(self) -> int:
        return self.records[0]

    @property
    def last(self) -> int:
        return self.records[-1]


@dataclass
class CFG:
    blocks: list[Block]
    edges: list[tuple[int, int, str]]    # (src block, dst block, kind)
    entry: int = 0
    block_of: dict[int, int] = field(default_factory=dict)
    exits_unknown: set[int] = field(default_factory=set)  # blocks with out-of-function successors

    @classmethod
    def from_edges(cls, n: int, edges, entry: int = 0) -> "CFG":
        """Abstract CFG with ``n`` empty blocks, for graph-only analyses."""
        return cls([Block(i, []) for i in range(n)], [(a, b, k) for a, b, k in edges], entry)

    def successors(self, b: int) -> list[int]:
        return [d for s, d, _ in self.edges if s == b]

    def predecessors(self, b: int) -> list[int]:
        return [s for s, d, _ in self.edges if d == b]

    def succ_map(self) -> dict[int, list[int]]:
        m: dict[int, list[int]] = {b.index: [] for b in self.blocks}
        for s, d, _ in self.edges:
            m[s].append(d)
        return m

    def pred_map(self) -> dict[int, list[int]]:
        m: dict[int, list[int]] = {b.index: [] for b in self.blocks}
        for s, d, _ in self.edges:
            m[d].append(s)
        return m


def _ends_block(rec: InstructionRecord) -> bool:
    op = rec.opcode
    return (op in CONDITIONAL or op in UNCONDITIONAL_JUMP
            or op in (CALL, CALLR, JMPR, RET, HALT))


def build_cfg(ir: ProgramIR, function: FunctionRecord) -> CFG:
    recs = ir.records
    members = function.members
    ft_preds: dict[int, int] = {}
    leaders = {function.head}
    for rid in members:
        r = recs[rid]
        if r.target_id is not None and r.opcode != CALL and r.target_id in members:
            leaders.add(r.target_id)
        if r.fallthrough_id is not None and r.fallthrough_id in members:
            ft_preds[r.fallthrough_id] = ft_preds.get(r.fallthrough_id, 0) + 1
            if _ends_block(r):
                leaders.add(r.fallthrough_id)
        if r.pinned_at is not None:
            leaders.add(rid)
    leaders.update(rid for rid in members if ft_preds.get(rid, 0) != 1)

    # discover blocks depth-first from the head so numbering is deterministic
    blocks: list[Block] = []
    block_of: dict[int, int] = {}
    stack = [function.head]
    while stack:
        lead = stack.pop()
        if lead in block_of:
            continue
        body = [lead]
        cur = recs[lead]
        while (not _ends_block(cur) and cur.fallthrough_id in members
               and cur.fallthrough_id not in leaders):
            cur = recs[cur.fallthrough_id]
            body.append(cur.id)
        b = Block(len(blocks), body)
        blocks.append(b)
        for rid in body:
            block_of[rid] = b.index
        nxt = []
        if cur.fallthrough_id in members:
            nxt.append(cur.fallthrough_id)
        if cur.target_id in members and cur.opcode != CALL:
            nxt.append(cur.target_id)
        stack.extend(reversed(nxt))

    edges = []
    unknown = set()
    for b in blocks:
        last = recs[b.last]
        op = last.opcode
        if op != CALL and last.target_id is not None:
            if last.target_id in block_of:
                edges.append((b.index, block_of[last.target_id], "taken"))
            else:
                unknown.add(b.index)
        if last.fallthrough_id is not None:
            kind = "call_return" if op in (CALL, CALLR) else "fallthrough"
            if last.fallthrough_id in block_of:
                edges.append((b.index, block_of[last.fallthrough_id], kind))
            else:
                unknown.add(b.index)
    return CFG(blocks, edges, 0, block_of, unknown)


# ---------------------------------------------------------------------------
# Dominators

@dataclass
class DomTree:
    parent: dict[int, int | None]
    root: int
    unreachable: set[int] = field(default_factory=set)

    def dominates(self, a: int, b: int) -> bool:
        """Does block ``a`` dominate block ``b``?"""
        if b not in self.parent:
            return False
        while b is not None:
            if b == a:
                return True
            b = self.parent[b]
        return False

    def dominators_of(self, b: int) -> set[int]:
        out = set()
        while b is not None:
            out.add(b)
            b = self.parent[b]
        return out


def reverse_postorder(cfg: CFG) -> list[int]:
    succ = cfg.succ_map()
    seen, order = set(), []
    stack = [(cfg.entry, iter(succ[cfg.entry]))]
    seen.add(cfg.entry)
    while stack:
        node, it = stack[-1]
        for s in it:
            if s not in seen:
                seen.add(s)
                stack.append((s, iter(succ[s])))
                break
        else:
            stack.pop()
            order.append(node)
    return order[::-1]


def dominators(cfg: CFG) -> DomTree:
    """Immediate dominators by iterative intersection over reverse postorder."""
    rpo = reverse_postorder(cfg)
    index = {b: i for i, b in enumerate(rpo)}
    preds = cfg.pred_map()
    idom: dict[int, int] = {cfg.entry: cfg.entry}

    def intersect(a, b):
        while a != b:
            while index[a] > index[b]:
                a = idom[a]
            while index[b] > index[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        changed = False
        for b in rpo[1:]:
            new = None
            for p in preds[b]:
                if p in idom:
                    new = p if new is None else intersect(p, new)
            if new is not None and idom.get(b) != new:
                idom[b] = new
                changed = True
    parent: dict[int, int | None] = {b: idom[b] for b in rpo if b != cfg.entry}
    parent[cfg.entry] = None
    unreachable = {b.index for b in cfg.blocks} - set(rpo)
    return DomTree(parent, cfg.entry, unreachable)


def loop_headers(cfg: CFG, dom: DomTree) -> set[int]:
    return {h for u, h, _ in cfg.edges if dom.dominates(h, u)}


# ---------------------------------------------------------------------------
# Call graph

def call_graph(ir: ProgramIR) -> dict[int, set[int]]:
    """Function id -> callee function ids.  CALLR may reach any pinned head."""
    by_head: dict[int, list[int]] = {}
    for f in ir.functions.values():
        by_head.setdefault(f.head, []).append(f.id)
    pinned_heads = sorted(f.id for f in ir.functions.values()
                          if ir.records[f.head].pinned_at is not None)
    graph: dict[int, set[int]] = {}
    for f in ir.functions.values():
        out = set()
        for rid in f.members:
            r = ir.records[rid]
            if r.opcode == CALL:
                out.update(by_head.get(r.target_id, ()))
            elif r.opcode == CALLR:
                out.update(pinned_heads)
        graph[f.id] = out
    return graph


# ---------------------------------------------------------------------------
# Liveness

def reads_writes(rec_or_instr) -> tuple[frozenset, frozenset]:
    ins = getattr(rec_or_instr, "instr", rec_or_instr)
    name = ins.mnemonic
    o = ins.operands
    if name == "MOV":
        return frozenset({o[1]}), frozenset({o[0]})
    if name in ("ADD", "SUB", "XOR", "AND", "OR"):
        return frozenset({o[0], o[1]}), frozenset({o[0]})
    if name == "MOVI":
        return frozenset(), frozenset({o[0]})
    if name in ("SHL", "SHR", "ADDI", "XORI"):
        return frozenset({o[0]}), frozenset({o[0]})
    if name == "LOAD":
        return frozenset({o[1]}), frozenset({o[0]})
    if name == "STORE":
        return frozenset({o[0], o[2]}), frozenset()
    if name == "PUSH":
        return frozenset({o[0], SP}), frozenset({SP})
    if name == "POP":
        return frozenset({SP}), frozenset({o[0], SP})
    if name == "CMP":
        return frozenset({o[0], o[1]}), frozenset()
    if name == "CMPI":
        return frozenset({o[0]}), frozenset()
    if name == "CALL":
        return ARG_REGS | {SP}, ARG_REGS | {SP}
    if name in ("CALLR", "JMPR"):
        return frozenset({o[0], SP}), frozenset({SP}) if name == "CALLR" else frozenset()
    if name == "RET":
        return frozenset({SP}), frozenset({SP})
    if name == "HALT":
        return frozenset({0}), frozenset()
    if name == "SYS":
        if o[0] == 2:
            return frozenset(), frozenset({0})
        return frozenset({0}), frozenset()
    return frozenset(), frozenset()


_BOUNDARY = {CALLR, JMPR, RET, HALT, 0x60}


def live_before(rec_or_instr, live_after: frozenset) -> frozenset:
    """Transfer function: registers live immediately before the instruction."""
    ins = getattr(rec_or_instr, "instr", rec_or_instr)
    r, w = reads_writes(ins)
    if ins.opcode in _BOUNDARY:
        live_after = ALL_REGS
    elif ins.opcode == CALL:
        # callee may clobber the argument registers; conservatively reads them
        return live_after | ARG_REGS | {SP}
    return (live_after - w) | r


@dataclass
class LivenessResult:
    dead_in: dict[int, frozenset]
    live_in: dict[int, frozenset]


def dead_registers(ir: ProgramIR, function: FunctionRecord, cfg: CFG | None = None) -> LivenessResult:
    cfg = cfg or build_cfg(ir, function)
    recs = ir.records
    succ = cfg.succ_map()
    block_in = {b.index: frozenset() for b in cfg.blocks}

    def block_transfer(b: Block, out: frozenset) -> frozenset:
        live = out
        for rid in reversed(b.records):
            live = live_before(recs[rid], live)
        return live

    changed = True
    order = list(reversed(reverse_postorder(cfg))) + [
        b.index for b in cfg.blocks if b.index not in set(reverse_postorder(cfg))]
    while changed:
        changed = False
        for bi in order:
            b = cfg.blocks[bi]
            out = frozenset().union(*(block_in[s] for s in succ[bi]))
            if bi in cfg.exits_unknown:
                out = ALL_REGS
            new = block_transfer(b, out)
            if new != block_in[bi]:
                block_in[bi] = new
                changed = True

    live_in: dict[int, frozenset] = {}
    for b in cfg.blocks:
        out = frozenset().union(*(block_in[s] for s in succ[b.index]))
        if b.index in cfg.exits_unknown:
            out = ALL_REGS
        live = out
        for rid in reversed(b.records):
            live = live_before(recs[rid], live)
            live_in[rid] = live
    dead = {rid: (ALL_REGS - live - {SP}) for rid, live in live_in.items()}
    return LivenessResult(dead, live_in)


def program_dead_registers(ir: ProgramIR) -> dict[int, frozenset]:
    """Dead-before sets for every record that belongs to some function."""
    out: dict[int, frozenset] = {}
    for fid in sorted(ir.functions):
        res = dead_registers(ir, ir.functions[fid])
        for rid, d in res.dead_in.items():
            # a record seen from several functions gets the intersection
            out[rid] = out[rid] & d if rid in out else d
    return out


def sp_frame_words(ir: ProgramIR, members) -> int:
    """Deepest negative sp-relative displacement used, in 32-bit words."""
    deepest = 0
    for rid in members:
        ins = ir.records[rid].instr
        if ins.mnemonic == "LOAD" and ins.operands[1] == SP and ins.operands[2] < 0:
            deepest = max(deepest, -ins.operands[2])
        elif ins.mnemonic == "STORE" and ins.operands[0] == SP and ins.operands[1] < 0:
            deepest = max(deepest, -ins.operands[1])
    return (deepest + 3) // 4


def positive_sp_access(ir: ProgramIR, members, include_inserted: bool = False) -> bool:
    for rid in members:
        r = ir.records[rid]
        if r.origin is not None and not include_inserted:
            continue
        ins = r.instr
        if ins.mnemonic == "LOAD" and ins.operands[1] == SP and ins.operands[2] > 0:
            return True
        if ins.mnemonic == "STORE" and ins.operands[0] == SP and ins.operands[1] > 0:
            return True
    return False
