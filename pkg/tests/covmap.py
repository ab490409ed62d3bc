"""Reading the coverage map back and predicting it from an original run."""

from collections import Counter

from binrewrite import vm

MAP_BASE, MAP_SIZE = 0x2000_0000, 65536


def map_cells(state):
    return {i: v for i in range(MAP_SIZE)
            if (v := state.memory.load32(MAP_BASE + 4 * i))}


def expected_map(exe, ir, ids_meta):
    """Replay the original program and apply the edge formula by hand."""
    ids = dict(tuple(map(int, kv.split(":"))) for kv in ids_meta.split(","))
    by_addr = {ir.records[rid].original_address: cur for rid, cur in ids.items()}
    s = vm.start(exe)
    prev, cells = 0, Counter()
    while not s.halted:
        if s.pc in by_addr:
            cur = by_addr[s.pc]
            cells[cur ^ prev] += 1
            prev = cur >> 1
        vm.step(s)
    return dict(cells)
