"""Layout engine: turn a (possibly transformed) IR back into an executable.

Only pinned addresses keep their original meaning.  Each pin gets either the
code that starts there (when it fits in place) or a jump to wherever that
code ends up.  All other code is packed into the remaining holes with a
best-fit policy, and whatever does not fit goes after the original text.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

from .irdb import DATA_TO_INSTRUCTION, IMM_TO_INSTRUCTION, ProgramIR
from .zxe import (
    DATA, JMP8, JMP32, TERMINATORS, TEXT, Executable, FormatError,
    Instruction, Section, decode_instruction, encode_instruction,
)

JMP_LONG_SIZE = 5
JMP_SHORT_SIZE = 2
FILL_BYTE = 0xFF


class LayoutError(Exception):
    pass


class PluginError(LayoutError):
    pass


@dataclass
class Dollop:
    id: int
    records: list[int]
    body_size: int
    term_target: int | None = None   # record reached by the appended JMP
    term_dollop: int | None = None   # dollop headed by term_target
    term_pin: int | None = None      # pin address of term_target, if pinned
    pinned_at: int | None = None
    home: int | None = None          # original address of the first original record

    @property
    def size(self) -> int:
        return self.body_size + (JMP_LONG_SIZE if self.term_target is not None else 0)


def canonical(ins: Instruction) -> Instruction:
    """Branches inside dollops always use their rel32 forms."""
    return ins.long_form()


def build_dollops(ir: ProgramIR) -> list[Dollop]:
    recs = ir.records
    ft_preds: dict[int, int] = {}
    for r in recs.values():
        if r.fallthrough_id is not None:
            ft_preds[r.fallthrough_id] = ft_preds.get(r.fallthrough_id, 0) + 1
    heads = [rid for rid in sorted(recs)
             if recs[rid].pinned_at is not None or ft_preds.get(rid, 0) != 1]
    head_set = set(heads)
    owner: dict[int, int] = {}
    dollops: list[Dollop] = []

    def grow(head):
        chain = [head]
        owner[head] = len(dollops)
        cur = recs[head]
        term = None
        while cur.opcode not in TERMINATORS:
            nxt = cur.fallthrough_id
            if nxt is None:
                break
            if nxt in head_set or nxt in owner:
                term = nxt
                break
            chain.append(nxt)
            owner[nxt] = len(dollops)
            cur = recs[nxt]
        size = sum(canonical(recs[r].instr).length for r in chain)
        home = next((recs[r].original_address for r in chain
                     if recs[r].original_address is not None), None)
        dollops.append(Dollop(len(dollops), chain, size, term,
                              pinned_at=recs[head].pinned_at, home=home))

    for h in heads:
        grow(h)
    # records only reachable through a fallthrough cycle
    for rid in sorted(recs):
        if rid not in owner:
            head_set.add(rid)
            grow(rid)
    for d in dollops:
        if d.term_target is not None:
            t = d.term_target
            if t not in head_set:
                # fell into the middle of an earlier chain; make it a head
                raise LayoutError(f"fallthrough into record {t} inside another dollop")
            d.term_dollop = owner[t]
            d.term_pin = recs[t].pinned_at
    return dollops


# ---------------------------------------------------------------------------
# Free space

class FreeSpace:
    """Disjoint, sorted half-open free ranges."""

    def __init__(self, ranges=()):
        self.starts: list[int] = []
        self.ends: list[int] = []
        for a, b in sorted(ranges):
            if b > a:
                self.starts.append(a)
                self.ends.append(b)

    def gaps(self) -> list[tuple[int, int]]:
        return list(zip(self.starts, self.ends))

    def _find(self, addr):
        i = bisect.bisect_right(self.starts, addr) - 1
        if i >= 0 and addr < self.ends[i]:
            return i
        return None

    def run_end(self, addr: int) -> int:
        """End of the free run containing ``addr`` (``addr`` itself if used)."""
        i = self._find(addr)
        return addr if i is None else self.ends[i]

    def is_free(self, addr: int, size: int) -> bool:
        i = self._find(addr)
        return i is not None and addr + size <= self.ends[i]

    def release(self, addr: int, size: int) -> None:
        """Return a used range to the free list, merging with neighbours."""
        i = bisect.bisect_left(self.starts, addr)
        if (i > 0 and self.ends[i - 1] > addr) or (i < len(self.starts) and self.starts[i] < addr + size):
            raise LayoutError(f"range {addr:#x}+{size} is already free")
        start, end = addr, addr + size
        if i < len(self.starts) and self.starts[i] == end:
            end = self.ends[i]
            del self.starts[i], self.ends[i]
        if i > 0 and self.ends[i - 1] == start:
            start = self.starts[i - 1]
            del self.starts[i - 1], self.ends[i - 1]
            i -= 1
        self.starts.insert(i, start)
        self.ends.insert(i, end)

    def take(self, addr: int, size: int) -> None:
        i = self._find(addr)
        if i is None or addr + size > self.ends[i]:
            raise LayoutError(f"range {addr:#x}+{size} is not free")
        a, b = self.starts[i], self.ends[i]
        del self.starts[i], self.ends[i]
        if addr + size < b:
            self.starts.insert(i, addr + size)
            self.ends.insert(i, b)
        if a < addr:
            self.starts.insert(i, a)
            self.ends.insert(i, addr)


# ---------------------------------------------------------------------------
# Placement

@dataclass
class PinReservation:
    address: int
    mode: str                 # coalesced, long_jump, short_jump (chained via island)
    dollop: int
    island: int | None = None


@dataclass
class PlacementMap:
    text_base: int
    text_size: int
    dollop_addr: dict[int, int] = field(default_factory=dict)
    elided: set[int] = field(default_factory=set)     # dollops whose appended JMP was dropped
    reservations: dict[int, PinReservation] = field(default_factory=dict)
    record_addr: dict[int, int] = field(default_factory=dict)
    extension_size: int = 0
    free: list[tuple[int, int]] = field(default_factory=list)
    log: list[tuple] = field(default_factory=list)

    @property
    def text_end(self) -> int:
        return self.text_base + self.text_size + self.extension_size

    def dump(self) -> str:
        lines = [f"text {self.text_base:#x}+{self.text_size} extension={self.extension_size}"]
        for ev in self.log:
            kind, start, size, what = ev[:4]
            lines.append(f"{kind:<16} {start:#010x} {size:>5} {what}")
        return "\n".join(lines) + "\n"


class LayoutPlugin:
    """Hook into placement and relocation.  Override what you need."""

    def propose_placement(self, dollop: Dollop, gaps: list[tuple[int, int]]) -> int | None:
        return None

    def custom_reloc(self, kind: str, site, resolved: int) -> bytes | None:
        return None


def _island_for(free: FreeSpace, pin: int) -> int | None:
    lo, hi = pin + 2 - 128, pin + 2 + 127     # rel8 reach from the short jump
    best = None
    for a, b in free.gaps():
        if b - a < JMP_LONG_SIZE or b <= lo or a > hi:
            continue
        first, last = max(a, lo), min(b - JMP_LONG_SIZE, hi)
        if first > last:
            continue
        cand = min(max(pin, first), last)
        key = (abs(cand - pin), cand)
        if best is None or key < best[0]:
            best = (key, cand)
    return None if best is None else best[1]


def place(dollops: list[Dollop], text_base: int, text_size: int,
          plugins=()) -> PlacementMap:
    """Assign an address to every dollop.

    Order: pins (highest first), chain islands, plugin proposals, then the
    rest by best fit.  Whenever a dollop lands, the dollop its terminator
    jumps to is pulled in right behind it if it fits, and dollops that jump
    to it are tried right in front of it; either way the jump is dropped.
    """
    pm = PlacementMap(text_base, text_size)
    limit = text_base + text_size
    free = FreeSpace([(text_base, limit)])
    by_id = {d.id: d for d in dollops}
    by_pin = {d.pinned_at: d for d in dollops if d.pinned_at is not None}
    ext = [limit]
    waiting: dict[int, list[Dollop]] = {}
    for d in dollops:
        if d.term_dollop is not None and d.term_pin is None:
            waiting.setdefault(d.term_dollop, []).append(d)

    def take(addr, size, kind, what):
        if addr >= limit:
            if addr != ext[0]:
                raise LayoutError(f"extension allocation out of order at {addr:#x}")
            ext[0] += size
        else:
            free.take(addr, size)
        pm.log.append((kind, addr, size, what))

    def release(addr, size, what):
        if addr >= limit:
            ext[0] -= size
        else:
            free.release(addr, size)
        pm.log.append(("release", addr, size, what))

    def put(d, addr, how, elide=False):
        take(addr, d.body_size if elide else d.size, how, f"dollop {d.id}")
        pm.dollop_addr[d.id] = addr
        if elide:
            pm.elided.add(d.id)

    def target_addr(d):
        if d.term_pin is not None:
            return d.term_pin
        return pm.dollop_addr.get(d.term_dollop)

    def fits(addr, size):
        if addr >= limit:
            return addr == ext[0]
        return free.is_free(addr, size)

    def follow(d) -> list[Dollop]:
        placed = []
        cur = d
        while cur.term_target is not None and cur.id not in pm.elided:
            a = pm.dollop_addr[cur.id] + cur.body_size
            if target_addr(cur) == a:
                release(a, JMP_LONG_SIZE, f"dollop {cur.id}")
                pm.elided.add(cur.id)
                break
            t = by_id[cur.term_dollop]
            if cur.term_pin is not None or t.id in pm.dollop_addr or t.pinned_at is not None:
                break
            if a >= limit and a + JMP_LONG_SIZE != ext[0]:
                break
            release(a, JMP_LONG_SIZE, f"dollop {cur.id}")
            if not fits(a, t.size):
                take(a, JMP_LONG_SIZE, "restore", f"dollop {cur.id}")
                break
            pm.elided.add(cur.id)
            put(t, a, "follow")
            placed.append(t)
            cur = t
        return placed

    def settle(d):
        queue = [d]
        while queue:
            x = queue.pop()
            new = follow(x)
            queue.extend(new)
            for y in [x] + new:
                ya = pm.dollop_addr[y.id]
                for w in waiting.get(y.id, ()):
                    if w.id in pm.dollop_addr:
                        continue
                    a = ya - w.body_size
                    if a >= text_base and a + w.body_size <= limit and free.is_free(a, w.body_size):
                        put(w, a, "adjacent", elide=True)
                        queue.append(w)

    # pins, highest address first so each sees its final right-hand neighbour
    shorts = []
    for p in sorted(by_pin, reverse=True):
        d = by_pin[p]
        if not text_base <= p < limit:
            raise LayoutError(f"pin {p:#x} outside text")
        room = free.run_end(p) - p
        if (d.term_pin is not None and p + d.body_size == d.term_pin
                and d.body_size <= room):
            put(d, p, "coalesce", elide=True)
            pm.reservations[p] = PinReservation(p, "coalesced", d.id)
        elif d.size <= room:
            put(d, p, "coalesce")
            pm.reservations[p] = PinReservation(p, "coalesced", d.id)
        elif room >= JMP_LONG_SIZE:
            take(p, JMP_LONG_SIZE, "long", f"pin {p:#x}")
            pm.reservations[p] = PinReservation(p, "long_jump", d.id)
        elif room >= JMP_SHORT_SIZE:
            take(p, JMP_SHORT_SIZE, "short", f"pin {p:#x}")
            pm.reservations[p] = PinReservation(p, "short_jump", d.id)
            shorts.append(p)
        else:
            other = min((q for q in by_pin if q > p), default=None)
            why = f"{room} byte(s) free, code needs {d.size}, a jump needs {JMP_SHORT_SIZE}"
            raise LayoutError(
                f"unplaceable pin {p:#x}: conflicts with pin {other:#x} ({why})" if other is not None
                else f"unplaceable pin {p:#x}: no room ({why})")
    for p in shorts:
        isl = _island_for(free, p)
        if isl is None:
            other = min((q for q in by_pin if q > p), default=p)
            raise LayoutError(f"unplaceable pin {p:#x}: no island within reach "
                              f"(crowded by pin {other:#x})")
        take(isl, JMP_LONG_SIZE, "island", f"pin {p:#x}")
        pm.reservations[p].island = isl

    rest = [d for d in dollops if d.id not in pm.dollop_addr]
    rest.sort(key=lambda d: (d.home is None, -(d.home or 0), d.id))
    for d in rest:
        for plugin in plugins:
            addr = plugin.propose_placement(d, free.gaps())
            if addr is None:
                continue
            if not free.is_free(addr, d.size):
                raise PluginError(f"{type(plugin).__name__} proposed {addr:#x} for dollop "
                                  f"{d.id} ({d.size} bytes) outside free space")
            put(d, addr, "plugin")
            break

    for d in sorted((d for d in dollops if d.id in pm.dollop_addr),
                    key=lambda d: -pm.dollop_addr[d.id]):
        settle(d)
    for d in rest:
        if d.id not in pm.dollop_addr and d.term_pin is not None:
            a = d.term_pin - d.body_size
            if a >= text_base and free.is_free(a, d.body_size):
                put(d, a, "adjacent", elide=True)
                settle(d)

    for d in sorted(rest, key=lambda d: (-d.size, d.home is None, -(d.home or 0), d.id)):
        if d.id in pm.dollop_addr:
            continue
        t = target_addr(d) if d.term_target is not None else None
        if t is not None and t - d.body_size >= text_base and t <= limit \
                and free.is_free(t - d.body_size, d.body_size):
            put(d, t - d.body_size, "adjacent", elide=True)
        else:
            best = None
            for a, b in free.gaps():
                if b - a >= d.size and (best is None or b - a < best[1] - best[0]):
                    best = (a, b)
            if best is not None:
                put(d, best[0], "bestfit")
            else:
                put(d, ext[0], "extension")
        settle(d)
    pm.extension_size = ext[0] - limit
    pm.free = free.gaps()
    return pm


# ---------------------------------------------------------------------------
# Patching, relocation, emission

def assign_record_addresses(ir: ProgramIR, dollops: list[Dollop], pm: PlacementMap) -> None:
    for d in dollops:
        a = pm.dollop_addr[d.id]
        for rid in d.records:
            pm.record_addr[rid] = a
            a += canonical(ir.records[rid].instr).length


def resolve(ir: ProgramIR, pm: PlacementMap, rid: int) -> int:
    """Where control must go to reach record ``rid``: its pin, else its address."""
    rec = ir.records[rid]
    if rec.pinned_at is not None:
        return rec.pinned_at
    try:
        return pm.record_addr[rid]
    except KeyError:
        raise LayoutError(f"record {rid} was never placed") from None


def _jump(opcode, at, size, target) -> bytes:
    disp = target - (at + size)
    if opcode == JMP8 and not -128 <= disp <= 127:
        raise LayoutError(f"short jump at {at:#x} cannot reach {target:#x}")
    return encode_instruction(Instruction(opcode, (disp,)))


def resolve_patches(ir: ProgramIR, dollops: list[Dollop], pm: PlacementMap) -> bytearray:
    """Encode every placed dollop and trampoline into a fresh text image."""
    if not pm.record_addr:
        assign_record_addresses(ir, dollops, pm)
    base = pm.text_base
    image = bytearray([FILL_BYTE]) * (pm.text_size + pm.extension_size)

    def write(at, blob):
        image[at - base:at - base + len(blob)] = blob

    for d in dollops:
        at = pm.dollop_addr[d.id]
        for rid in d.records:
            rec = ir.records[rid]
            ins = canonical(rec.instr)
            if ins.is_branch:
                disp = resolve(ir, pm, rec.target_id) - (at + ins.length)
                assert -2**31 <= disp < 2**31, "rel32 overflow"
                ins = ins.with_displacement(disp)
            write(at, encode_instruction(ins))
            at += ins.length
        if d.term_target is not None and d.id not in pm.elided:
            write(at, _jump(JMP32, at, JMP_LONG_SIZE, resolve(ir, pm, d.term_target)))
    for p, res in pm.reservations.items():
        dest = pm.dollop_addr[res.dollop]
        if res.mode == "long_jump":
            write(p, _jump(JMP32, p, JMP_LONG_SIZE, dest))
        elif res.mode == "short_jump":
            write(p, _jump(JMP8, p, JMP_SHORT_SIZE, res.island))
            write(res.island, _jump(JMP32, res.island, JMP_LONG_SIZE, dest))
    return image


def apply_relocations(ir: ProgramIR, pm: PlacementMap, image: bytearray,
                      plugins=()) -> dict[int, bytes]:
    """Rewrite relocation sites; returns the final bytes of each data object."""
    data = {d.id: bytearray(d.data) for d in ir.data_objects.values()}
    custom = []
    for r in ir.all_relocations():
        if r.kind not in (DATA_TO_INSTRUCTION, IMM_TO_INSTRUCTION):
            custom.append(r)
            continue
        if r.referent not in ir.records:
            raise LayoutError(f"relocation referent {r.referent} missing")
        value = resolve(ir, pm, r.referent).to_bytes(4, "little")
        if r.site_kind == "data":
            data[r.site_id][r.offset:r.offset + 4] = value
        else:
            at = pm.record_addr[r.site_id] - pm.text_base + r.offset
            image[at:at + 4] = value
    for r in custom:
        resolved = resolve(ir, pm, r.referent)
        for plugin in plugins:
            blob = plugin.custom_reloc(r.kind, r, resolved)
            if blob is None:
                continue
            if r.site_kind == "data":
                data[r.site_id][r.offset:r.offset + len(blob)] = blob
            else:
                at = pm.record_addr[r.site_id] - pm.text_base + r.offset
                image[at:at + len(blob)] = blob
            break
        else:
            raise LayoutError(f"no plugin handles relocation kind {r.kind!r}")
    return {k: bytes(v) for k, v in data.items()}


def emit(ir: ProgramIR, pm: PlacementMap, image: bytearray, data: dict[int, bytes]) -> Executable:
    base = pm.text_base
    # undecodable blobs go back where they were if nothing took their bytes
    free = FreeSpace(pm.free)
    for addr, blob in ir.blobs:
        for i, byte in enumerate(blob):
            if free.is_free(addr + i, 1):
                image[addr + i - base] = byte
    sections = [Section(TEXT, base, bytes(image))]
    for d in sorted(ir.data_objects.values(), key=lambda d: d.vaddr):
        sections.append(Section(DATA, d.vaddr, data[d.id]))
    exe = Executable(ir.entry_address, sections)
    try:
        exe.validate()
    except FormatError as e:
        raise LayoutError(f"emitted executable is invalid: {e}") from None
    return exe


@dataclass
class BackendResult:
    exe: Executable
    dollops: list[Dollop]
    placement: PlacementMap


def reconstitute(ir: ProgramIR, plugins=()) -> BackendResult:
    dollops = build_dollops(ir)
    pm = place(dollops, ir.text_base, ir.text_size, plugins)
    assign_record_addresses(ir, dollops, pm)
    image = resolve_patches(ir, dollops, pm)
    data = apply_relocations(ir, pm, image, plugins)
    exe = emit(ir, pm, image, data)
    return BackendResult(exe, dollops, pm)


# ---------------------------------------------------------------------------
# Structural checks

def placement_violations(dollops: list[Dollop], pm: PlacementMap,
                         image: bytes | None = None,
                         pin_targets: dict[int, int] | None = None) -> list[str]:
    """Disjointness, pin resolution and best-fit minimality.

    ``pin_targets`` maps pin address -> address of the code it must reach;
    it defaults to the pinned dollop's address.  When ``image`` is given,
    pin resolution is checked by decoding the emitted bytes.
    """
    errs = []
    ranges = []
    for d in dollops:
        if d.id not in pm.dollop_addr:
            errs.append(f"dollop {d.id} unplaced")
            continue
        size = d.body_size if d.id in pm.elided else d.size
        ranges.append((pm.dollop_addr[d.id], size, f"dollop {d.id}"))
    for p, res in pm.reservations.items():
        if res.mode == "long_jump":
            ranges.append((p, JMP_LONG_SIZE, f"trampoline {p:#x}"))
        elif res.mode == "short_jump":
            ranges.append((p, JMP_SHORT_SIZE, f"trampoline {p:#x}"))
            if res.island is None:
                errs.append(f"short pin {p:#x} has no island")
            else:
                ranges.append((res.island, JMP_LONG_SIZE, f"island {p:#x}"))
    ranges.sort()
    for (a, n, wa), (b, m, wb) in zip(ranges, ranges[1:]):
        if b < a + n:
            errs.append(f"overlap: {wa} [{a:#x},{a + n:#x}) and {wb} [{b:#x},{b + m:#x})")
    for a, n, w in ranges:
        if a < pm.text_base or a + n > pm.text_end:
            errs.append(f"{w} outside text")

    by_pin = {d.pinned_at: d for d in dollops if d.pinned_at is not None}
    for p, d in by_pin.items():
        res = pm.reservations.get(p)
        if res is None:
            errs.append(f"pin {p:#x} unresolved")
            continue
        goal = (pin_targets or {}).get(p, pm.dollop_addr.get(d.id))
        if image is not None:
            at, hops = p, 0
            while at != goal:
                try:
                    ins, n = decode_instruction(image, at - pm.text_base)
                except Exception:
                    errs.append(f"pin {p:#x}: undecodable bytes at {at:#x}")
                    break
                if ins.opcode not in (JMP8, JMP32) or hops >= 2:
                    errs.append(f"pin {p:#x} does not reach its code within 2 jumps")
                    break
                at += n + ins.displacement
                hops += 1
        else:
            hops = {"coalesced": 0, "long_jump": 1, "short_jump": 2}[res.mode]
            if res.mode == "coalesced" and pm.dollop_addr.get(d.id) != p:
                errs.append(f"pin {p:#x} coalesced but dollop placed elsewhere")
    errs.extend(_replay_best_fit(pm))
    return errs


def _replay_best_fit(pm: PlacementMap) -> list[str]:
    """Replay the allocation log on a naive byte map and re-check best fit."""
    lo, hi = pm.text_base, pm.text_base + pm.text_size
    used = bytearray(hi - lo)
    errs = []

    def gaps():
        out, i = [], 0
        while i < len(used):
            if used[i]:
                i += 1
                continue
            j = i
            while j < len(used) and not used[j]:
                j += 1
            out.append((lo + i, lo + j))
            i = j
        return out

    for kind, start, size, what in pm.log:
        if kind in ("bestfit", "extension"):
            fitting = [(b - a, a) for a, b in gaps() if b - a >= size]
            if kind == "extension" and fitting:
                errs.append(f"{what}: sent to extension although a gap fits")
            if kind == "bestfit":
                want = min(fitting) if fitting else None
                got = next(((b - a, a) for a, b in gaps() if a == start), None)
                if want is None or got != want:
                    errs.append(f"{what}: best-fit chose {start:#x}, expected "
                                f"{want[1]:#x}" if want else f"{what}: no gap fits")
        if kind == "release":
            if start < hi:
                used[start - lo:start - lo + size] = bytes(size)
            continue
        if start < hi:
            seg = used[start - lo:start - lo + size]
            if any(seg):
                errs.append(f"{what}: allocation overlaps used bytes at {start:#x}")
            used[start - lo:start - lo + size] = b"\x01" * len(seg)
    return errs
