"""Seeded generator of ABI-conforming test programs.

Calling convention of generated code:

* arguments in r0..r3, result in r0; r0..r3 are clobbered by calls
* r4..r7 are callee-saved (pushed in the prologue, popped before RET)
* a function with F frame words keeps locals at [sp-4], ..., [sp-4F] and
  initialises them in its prologue; around every call it moves sp down by
  4F so the callee cannot clobber them
* CMP/CMPI is always immediately followed by the conditional jump using it
* function heads are never branch targets, and every function is called
  directly at least once (also those reached through tables)
* bytes between functions are 0xFF

Dynamic instruction counts are estimated while generating and kept small.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import vm
from .asm import Assembler
from .frontend import lift
from .irdb import validate_ir
from .zxe import CONDITIONAL, FORM_LENGTH, MNEMONICS, OPCODES, SP, Executable

SIZE_LIMITS = {"small": 200, "medium": 2000, "large": 20000}
TEXT_BASE = 0x1000
DATA_BASE = 0x400000
MAX_DEPTH = 8
GEN_STEP_LIMIT = 1_000_000
NEG = lambda n: -n & 0xFFFFFFFF  # noqa: E731

SHORT_OF = {"JMP": "JMP.s", "JZ": "JZ.s", "JNZ": "JNZ.s", "JLT": "JLT.s", "JGE": "JGE.s"}


class GenerationError(RuntimeError):
    pass


@dataclass
class CorpusProgram:
    name: str
    seed: int
    size_class: str
    exe: Executable
    inputs: list[bytes]
    expected: list[vm.ExecutionResult]
    stats: dict[str, int] = field(default_factory=dict)


@dataclass
class _Fn:
    index: int
    name: str
    depth: int
    frame: int
    target: int
    children: list[int] = field(default_factory=list)
    cost: int = 0


class _Generator:
    def __init__(self, seed: int, size_class: str):
        self.rng = random.Random(seed)
        self.size_class = size_class
        self.a = Assembler()
        self.labels = 0
        self.count = 0
        self.tables: list[tuple[str, list[str]]] = []
        self.globals = 4
        self.branches: list[tuple[int, str]] = []   # (item index, label) candidates for rel8
        self.use_short = self.rng.random() < 0.2
        self.fns: list[_Fn] = []

    # -- emission ----------------------------------------------------------
    def fresh(self, stem: str) -> str:
        self.labels += 1
        return f".{stem}{self.labels}"

    def emit(self, mnemonic: str, *ops) -> None:
        if mnemonic in SHORT_OF and isinstance(ops[0], str):
            self.branches.append((len(self.a._items()), ops[0]))
        self.a.ins(mnemonic, *ops)
        self.count += 1

    def const(self) -> int:
        # keep immediates away from text addresses so they never look like code pointers
        if self.rng.random() < 0.7:
            return self.rng.randrange(0, 0x400)
        return self.rng.randrange(0x01000000, 0xFFFFFFFF)

    # -- statements; each returns an upper bound on executed instructions ---
    def s_arith(self, fn: _Fn) -> int:
        r = self.rng
        kind = r.randrange(8)
        d, s = r.choice(((4, 5), (5, 4)))
        if kind == 0:
            self.emit("MOVI", 1, self.const())
            self.emit(r.choice(("ADD", "SUB", "XOR", "OR", "AND")), d, 1)
            return 2
        if kind == 1:
            self.emit(r.choice(("ADD", "SUB", "XOR")), d, s)
            return 1
        if kind == 2:
            self.emit(r.choice(("SHL", "SHR")), d, r.randrange(1, 8))
            return 1
        if kind == 3:
            self.emit("ADDI", d, self.const())
            return 1
        if kind == 4:
            self.emit("XORI", d, self.const())
            return 1
        if kind == 5:
            self.emit("MOV", 2, s)
            self.emit("SHL", 2, r.randrange(1, 5))
            self.emit("ADD", d, 2)
            return 3
        if kind == 6:
            self.emit("MOV", 3, d)
            self.emit("SHR", 3, r.randrange(1, 9))
            self.emit("XOR", s, 3)
            return 3
        self.emit("MOV", d, s)
        self.emit("ADDI", d, r.randrange(1, 100))
        return 2

    def s_local(self, fn: _Fn) -> int:
        if not fn.frame:
            return self.s_arith(fn)
        k = self.rng.randrange(1, fn.frame + 1)
        k2 = self.rng.randrange(1, fn.frame + 1)
        self.emit("LOAD", 2, SP, -4 * k)
        self.emit("ADD", 4, 2)
        self.emit("STORE", SP, -4 * k2, 5)
        return 3

    def s_global(self, fn: _Fn) -> int:
        addr = DATA_BASE + 4 * self.rng.randrange(self.globals)
        self.emit("MOVI", 3, addr)
        self.emit("LOAD", 2, 3, 0)
        self.emit("ADD", 2, 4)
        self.emit("STORE", 3, 0, 2)
        self.emit("XOR", 5, 2)
        return 5

    def s_output(self, fn: _Fn) -> int:
        self.emit("MOV", 0, self.rng.choice((4, 5)))
        self.emit("SYS", 3)
        self.emit("MOVI", 0, 10)
        self.emit("SYS", 1)
        return 4

    def s_input(self, fn: _Fn) -> int:
        self.emit("SYS", 2)
        self.emit("ADD", self.rng.choice((4, 5)), 0)
        return 2

    def s_if(self, fn: _Fn, depth: int, loops: int) -> int:
        r = self.rng
        other, join = self.fresh("else"), self.fresh("join")
        if r.random() < 0.5:
            self.emit("CMP", 4, 5)
        else:
            self.emit("CMPI", r.choice((4, 5)), r.randrange(0, 0x200))
        self.emit(r.choice(("JZ", "JNZ", "JLT", "JGE")), other)
        c1 = self.block(fn, depth + 1, loops, r.randrange(1, 4))
        self.emit("JMP", join)
        self.a.label(other)
        c2 = self.block(fn, depth + 1, loops, r.randrange(1, 4))
        self.a.label(join)
        return 3 + max(c1, c2)

    def s_loop(self, fn: _Fn, depth: int, loops: int) -> int:
        reg = 6 + loops                 # r6 outer counter, r7 inner
        n = self.rng.randrange(1, 5)
        head = self.fresh("loop")
        self.emit("MOVI", reg, n)
        self.a.label(head)
        body = self.block(fn, depth + 1, loops + 1, self.rng.randrange(1, 4))
        self.emit("ADDI", reg, NEG(1))
        self.emit("CMPI", reg, 0)
        self.emit("JNZ", head)
        return 1 + n * (body + 3)

    def s_switch(self, fn: _Fn) -> int:
        n = self.rng.choice((2, 4))
        dflt, join = self.fresh("default"), self.fresh("join")
        cases = [self.fresh("case") for _ in range(n)]
        table = self.fresh("jt")
        self.tables.append((table, cases))
        self.emit("MOV", 2, self.rng.choice((4, 5)))
        self.emit("MOVI", 3, n - 1)
        self.emit("AND", 2, 3)
        self.emit("CMPI", 2, n)
        self.emit("JGE", dflt)
        self.emit("SHL", 2, 2)
        self.emit("MOVI", 3, table)
        self.emit("ADD", 3, 2)
        self.emit("LOAD", 3, 3, 0)
        self.emit("JMPR", 3)
        worst = 0
        for lab in [dflt] + cases:
            self.a.label(lab)
            c = self.s_arith(fn)
            if self.rng.random() < 0.3:
                c += self.s_arith(fn)
            worst = max(worst, c)
            self.emit("JMP", join)
        self.a.label(join)
        return 10 + worst + 1

    def _call_setup(self, fn: _Fn) -> None:
        if fn.frame:
            self.emit("ADDI", SP, NEG(4 * fn.frame))
        self.emit("MOV", 0, 4)
        self.emit("MOV", 1, 5)

    def _call_finish(self, fn: _Fn) -> None:
        if fn.frame:
            self.emit("ADDI", SP, 4 * fn.frame)
        self.emit(self.rng.choice(("ADD", "XOR")), self.rng.choice((4, 5)), 0)

    def s_call(self, fn: _Fn, callee: int) -> int:
        self._call_setup(fn)
        self.emit("CALL", self.fns[callee].name)
        self._call_finish(fn)
        return 6 + self.fns[callee].cost

    def s_pointer_call(self, fn: _Fn, callee: int) -> int:
        self._call_setup(fn)
        self.emit("MOVI", 3, self.fns[callee].name)
        self.emit("CALLR", 3)
        self._call_finish(fn)
        return 7 + self.fns[callee].cost

    def s_table_call(self, fn: _Fn, callees: list[int]) -> int:
        size = 1 if len(callees) == 1 else 2 if len(callees) == 2 else 4
        entries = [self.fns[callees[i % len(callees)]].name for i in range(size)]
        table = self.fresh("ft")
        self.tables.append((table, entries))
        self._call_setup(fn)
        self.emit("MOV", 2, self.rng.choice((4, 5)))
        self.emit("MOVI", 3, size - 1)
        self.emit("AND", 2, 3)
        self.emit("SHL", 2, 2)
        self.emit("MOVI", 3, table)
        self.emit("ADD", 3, 2)
        self.emit("LOAD", 3, 3, 0)
        self.emit("CALLR", 3)
        self._call_finish(fn)
        return 13 + max(self.fns[c].cost for c in callees)

    def callees(self, fn: _Fn, budget: int) -> list[int]:
        return [f.index for f in self.fns[1:]
                if f.depth > fn.depth and f.cost and f.cost <= budget]

    def statement(self, fn: _Fn, depth: int, loops: int) -> int:
        r = self.rng
        roll = r.random()
        budget = 60 if loops else 400
        if roll < 0.12 and loops < 2 and depth < 3:
            return self.s_loop(fn, depth, loops)
        if roll < 0.22 and depth < 3:
            return self.s_if(fn, depth, loops)
        if roll < 0.27:
            return self.s_switch(fn)
        if roll < 0.36:
            options = self.callees(fn, budget)
            if options:
                pick = r.random()
                if pick < 0.5:
                    return self.s_call(fn, r.choice(options))
                if pick < 0.75:
                    return self.s_pointer_call(fn, r.choice(options))
                return self.s_table_call(fn, r.sample(options, min(len(options), r.randrange(1, 5))))
        if roll < 0.48:
            return self.s_local(fn)
        if roll < 0.54:
            return self.s_global(fn)
        if roll < 0.58:
            return self.s_output(fn)
        if roll < 0.61:
            return self.s_input(fn)
        return self.s_arith(fn)

    def block(self, fn: _Fn, depth: int, loops: int, n: int) -> int:
        return sum(self.statement(fn, depth, loops) for _ in range(n))

    # -- functions ---------------------------------------------------------
    def function_body(self, fn: _Fn) -> int:
        """Everything after the prologue up to (not including) the epilogue."""
        cost = 0
        required = list(fn.children)
        self.rng.shuffle(required)
        start = self.count
        while self.count - start < fn.target or required:
            if required and (self.rng.random() < 0.3 or self.count - start >= fn.target):
                cost += self.s_call(fn, required.pop())
            else:
                cost += self.statement(fn, 0, 0)
        return cost

    def emit_function(self, fn: _Fn) -> None:
        a = self.a
        a.label(fn.name)
        for reg in (4, 5, 6, 7):
            self.emit("PUSH", reg)
        self.emit("MOV", 4, 0)
        self.emit("MOV", 5, 1)
        for k in range(1, fn.frame + 1):
            self.emit("STORE", SP, -4 * k, 4 if k % 2 else 5)
        cost = 6 + fn.frame + self.function_body(fn)
        self.emit("MOV", 0, 4)
        for reg in (7, 6, 5, 4):
            self.emit("POP", reg)
        self.emit("RET")
        fn.cost = cost + 6

    def emit_main(self, fn: _Fn) -> None:
        self.a.label("main")
        self.emit("SYS", 2)
        self.emit("MOV", 4, 0)
        self.emit("SYS", 2)
        self.emit("MOV", 5, 0)
        for k in range(1, fn.frame + 1):
            self.emit("STORE", SP, -4 * k, 4 if k % 2 else 5)
        fn.cost = self.function_body(fn)
        self.emit("MOV", 0, 4)
        self.emit("SYS", 3)
        self.emit("MOVI", 0, 10)
        self.emit("SYS", 1)
        self.emit("MOV", 0, 5)
        self.emit("MOVI", 1, 0x7F)
        self.emit("AND", 0, 1)
        self.emit("HALT")

    def build(self) -> tuple[Executable, dict]:
        r = self.rng
        limit = SIZE_LIMITS[self.size_class]
        lo = {"small": 40, "medium": 200, "large": 2000}[self.size_class]
        total = r.randrange(lo, limit // 2)
        nfn = max(1, total // r.randrange(30, 70))
        share = total // (nfn + 1)

        self.fns = [_Fn(0, "main", 0, r.randrange(0, 4), share)]
        for j in range(1, nfn + 1):
            parent = r.choice([f for f in self.fns if f.depth < MAX_DEPTH])
            f = _Fn(j, f"f{j}", parent.depth + 1, r.randrange(0, 7),
                    max(8, int(share * r.uniform(0.5, 1.5))))
            parent.children.append(j)
            self.fns.append(f)

        # callees are emitted first so their costs are known to callers;
        # deeper functions first, main last
        a = self.a
        a.text(TEXT_BASE)
        a.entry = "main"
        bodies: dict[int, list] = {}
        branch_sets: dict[int, list] = {}
        for f in sorted(self.fns, key=lambda f: (-f.depth, f.index)):
            a.text(0)          # scratch section, spliced below
            self.branches = []
            (self.emit_main if f.index == 0 else self.emit_function)(f)
            bodies[f.index] = a.sections.pop()[2]
            branch_sets[f.index] = self.branches
        a.sections.clear()
        a.text(TEXT_BASE)
        items = a._items()
        cand = []
        for f in self.fns:
            off = len(items)
            items.extend(bodies[f.index])
            cand.extend((off + i, lab) for i, lab in branch_sets[f.index])
            if f.index and r.random() < 0.4:
                a.raw(b"\xff" * r.randrange(1, 4))
        a.data(DATA_BASE)
        a.word(*([0] * self.globals))
        for name, entries in self.tables:
            a.label(name)
            a.word(*entries)
        exe, labels = a.build()
        if self.use_short:
            exe, labels = self.shorten(cand, labels)
        estimate = self.fns[0].cost
        return exe, {"instructions": self.count, "functions": len(self.fns),
                     "estimate": estimate, "short_branches": int(self.use_short)}

    def shorten(self, cand, labels):
        """Switch branches to rel8 where the rel32 distance already fits.

        Shrinking instructions only brings labels closer, so every chosen
        branch still fits after all of them shrink.
        """
        items = self.a.sections[0][2]
        addr, pc = [], TEXT_BASE
        for it in items:
            addr.append(pc)
            if it[0] == "ins":
                pc += FORM_LENGTH[OPCODES[it[1]][1]]
            elif it[0] == "raw":
                pc += len(it[1])
        for idx, lab in cand:
            kind, op, ops = items[idx]
            disp = labels[lab] - (addr[idx] + 5)
            if -120 <= disp <= 120:
                items[idx] = (kind, MNEMONICS[SHORT_OF[OPCODES[op][0]]], ops)
        return self.a.build()


def choose_size_class(seed: int) -> str:
    roll = random.Random(seed * 7919 + 17).random()
    return "small" if roll < 0.7 else "medium" if roll < 0.95 else "large"


def generate_program(seed: int, size_class: str = "mixed") -> tuple[Executable, dict]:
    if size_class == "mixed":
        size_class = choose_size_class(seed)
    if size_class not in SIZE_LIMITS:
        raise ValueError(f"unknown size class {size_class!r}")
    exe, stats = _Generator(seed, size_class).build()
    stats["size_class"] = size_class
    return exe, stats


def make_inputs(seed: int, n: int = 2) -> list[bytes]:
    r = random.Random(seed ^ 0x5EED)
    return [bytes(r.randrange(256) for _ in range(r.randrange(0, 6))) for _ in range(n)]


def abi_violations(exe: Executable) -> list[str]:
    """Static conformance check for generated programs."""
    problems = []
    ir = lift(exe)
    problems += [f"ir: {v}" for v in validate_ir(ir)]
    recs = ir.records
    preds: dict[int, list[int]] = {}
    for r in recs.values():
        if r.fallthrough_id is not None:
            preds.setdefault(r.fallthrough_id, []).append(r.id)
    heads = {f.head for f in ir.functions.values()}
    called = {r.target_id for r in recs.values() if r.instr.mnemonic == "CALL"}
    for r in recs.values():
        ins = r.instr
        if r.opcode in CONDITIONAL:
            p = preds.get(r.id, [])
            if len(p) != 1 or recs[p[0]].instr.mnemonic not in ("CMP", "CMPI"):
                problems.append(f"conditional at {r.original_address:#x} not preceded by a compare")
        if r.target_id in heads and ins.mnemonic != "CALL":
            problems.append(f"function head {recs[r.target_id].original_address:#x} is a branch target")
        if ins.mnemonic == "LOAD" and ins.operands[1] == SP and ins.operands[2] > 0:
            problems.append(f"positive sp offset at {r.original_address:#x}")
        if ins.mnemonic == "STORE" and ins.operands[0] == SP and ins.operands[1] > 0:
            problems.append(f"positive sp offset at {r.original_address:#x}")
    for f in ir.functions.values():
        if f.head != ir.entry_record and f.head not in called:
            problems.append(f"function {f.name} never called directly")
    for addr, blob in ir.blobs:
        if set(blob) != {0xFF}:
            problems.append(f"non-filler bytes at {addr:#x}")
    return problems


def gen_corpus(seed: int, count: int, size_class: str = "mixed",
               step_limit: int = GEN_STEP_LIMIT, retries: int = 10) -> list[CorpusProgram]:
    """Programs for seeds ``seed .. seed+count-1`` with emulator-computed outputs."""
    if count < 1:
        raise ValueError("count must be >= 1")
    out = []
    for s in range(seed, seed + count):
        out.append(generate_checked(s, size_class, step_limit, retries))
    return out


def generate_checked(seed: int, size_class: str = "mixed", step_limit: int = GEN_STEP_LIMIT,
                     retries: int = 10) -> CorpusProgram:
    for attempt in range(retries):
        sub = seed if attempt == 0 else seed * 1000 + attempt
        exe, stats = generate_program(sub, size_class if size_class != "mixed"
                                      else choose_size_class(seed))
        inputs = make_inputs(seed)
        results = [vm.run(exe, i, step_limit) for i in inputs]
        if any(r.outcome != "exit" for r in results):
            continue
        if stats["instructions"] > SIZE_LIMITS[stats["size_class"]]:
            continue
        ir = lift(exe)
        stats["pins"] = len(ir.pins)
        stats["indirect_sites"] = sum(1 for r in ir.records.values()
                                      if r.instr.mnemonic in ("CALLR", "JMPR"))
        stats["text_bytes"] = len(exe.text.data)
        stats["attempt"] = attempt
        return CorpusProgram(f"p{seed:04d}", seed, stats["size_class"], exe, inputs, results, stats)
    raise GenerationError(f"seed {seed}: no terminating program within the size class "
                          f"after {retries} attempts")
