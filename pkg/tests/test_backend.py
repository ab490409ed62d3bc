import dataclasses
import random

import pytest

from binrewrite import backend, harness, vm
from binrewrite.asm import assemble
from binrewrite.backend import LayoutError, LayoutPlugin, PluginError, build_dollops, reconstitute
from binrewrite.frontend import lift
from binrewrite.irdb import DATA_TO_INSTRUCTION
from binrewrite.transforms import apply_transforms
from binrewrite.zxe import Instruction, decode_instruction

import fixtures as F
import layouts
import oracles

I = Instruction.of


def rewritten(src):
    exe, labels = assemble(src)
    ir = lift(exe)
    return exe, labels, ir, reconstitute(ir)


def test_straight_line_is_one_dollop():
    _, _, ir, res = rewritten(F.STRAIGHT)
    assert len(res.dollops) == 1 and res.dollops[0].term_target is None


def test_straight_line_text_unchanged():
    exe, _, _, res = rewritten(F.STRAIGHT)
    assert res.exe.text.data == exe.text.data
    assert res.placement.extension_size == 0


def test_fallthrough_into_pin_splits_dollop():
    _, _, ir, res = rewritten(F.CALL_CHAIN)
    call = next(r for r in ir.records.values() if r.instr.mnemonic == "CALL")
    d = next(d for d in res.dollops if call.id in d.records)
    assert d.records[-1] == call.id and d.term_target == call.fallthrough_id
    assert d.term_pin == ir.records[call.fallthrough_id].pinned_at


def test_every_record_in_one_dollop(mini_corpus):
    for p in mini_corpus:
        ir = lift(p.exe)
        seen = [rid for d in build_dollops(ir) for rid in d.records]
        assert sorted(seen) == sorted(ir.records)


def test_single_pin_coalesced():
    exe, _, ir, res = rewritten(F.WHILE_LOOP)
    (p,) = ir.pins
    assert res.placement.reservations[p].mode == "coalesced"
    d = res.dollops[res.placement.reservations[p].dollop]
    n = d.body_size
    assert res.exe.text.data[:n] == exe.text.data[:n]


def test_ret_before_pin_coalesced():
    _, labels, ir, res = rewritten(F.RET_BEFORE_PIN)
    assert labels["h"] - labels["f"] == 2
    assert res.placement.reservations[labels["f"]].mode == "coalesced"
    assert res.exe.text.data[labels["f"] - 0x1000] == 0x53
    exe = assemble(F.RET_BEFORE_PIN)[0]
    assert vm.run(res.exe).observable == vm.run(exe).observable


def test_self_loop_branches_back_to_own_head():
    _, labels, ir, res = rewritten(F.SELF_LOOP)
    pm = res.placement
    loop = next(r for r in ir.records.values() if r.original_address == labels["spin"])
    back = next(r for r in ir.records.values() if r.target_id == loop.id)
    at = pm.record_addr[back.id]
    ins, n = decode_instruction(res.exe.text.data, at - pm.text_base)
    assert ins.displacement < 0 and at + n + ins.displacement == pm.record_addr[loop.id]


def test_branch_to_pin_targets_pin_address():
    src = """
    .text 0x1000
    main:
        MOVI r0, 0
        JMP over
        .byte 0xff
    over:
        HALT
    .data 0x400000
        .word over
    """
    _, labels, ir, res = rewritten(src)
    jmp = next(r for r in ir.records.values() if r.instr.mnemonic == "JMP")
    at = res.placement.record_addr[jmp.id]
    ins, n = decode_instruction(res.exe.text.data, at - 0x1000)
    assert at + n + ins.displacement == labels["over"]


def test_jump_table_words_unchanged():
    exe, _, _, res = rewritten(F.JUMP_TABLE)
    assert [s.data for s in res.exe.sections[1:]] == [s.data for s in exe.sections[1:]]


def test_data_without_relocations_unchanged():
    exe, _, _, res = rewritten(F.STALE_READ)
    assert [(s.vaddr, s.data) for s in res.exe.sections[1:]] == \
           [(s.vaddr, s.data) for s in exe.sections[1:]]


def test_inserted_record_referenced_from_data():
    exe, _, ir, _ = rewritten(F.INDIRECT_VIA_TABLE)
    assert vm.run(exe).code == 7
    halt = ir.add_record(I("HALT"), origin="test")
    movi = ir.add_record(I("MOVI", 0, 42), fallthrough_id=halt.id, origin="test")
    (table,) = ir.data_objects.values()
    (i,) = [i for i, r in enumerate(table.relocs) if r.kind == DATA_TO_INSTRUCTION]
    reloc = table.relocs[i] = dataclasses.replace(table.relocs[i], referent=movi.id)
    res = reconstitute(ir)
    word = int.from_bytes(res.exe.sections[1].data[reloc.offset:reloc.offset + 4], "little")
    assert word == res.placement.record_addr[movi.id]
    assert word >= ir.text_base + ir.text_size
    assert vm.run(res.exe).code == 42


def test_conflicting_decodings_both_emitted():
    exe, labels = F.conflict_program()
    ir = lift(exe)
    res = reconstitute(ir)
    for inp in (b"h", b"x", b""):
        assert vm.run(res.exe, inp).observable == vm.run(exe, inp).observable
    assert vm.run(res.exe, b"h").code == 104


def test_relink_on_corpus(mini_corpus):
    for p in mini_corpus:
        ir = lift(p.exe)
        res = reconstitute(ir)
        assert layouts.relink_mismatches(ir, res) == [], p.name
        assert backend.placement_violations(res.dollops, res.placement, res.exe.text.data) == []


def test_corpus_extension_bounded(mini_corpus):
    for p in mini_corpus:
        res = harness.rewrite(p.exe, [])
        assert res.placement.extension_size <= len(p.exe.text.data)


def test_dense_pins_use_short_jumps_and_islands():
    rng = random.Random(5)
    for _ in range(50):
        ir = layouts.random_layout_ir(rng, dense=True)
        res = reconstitute(ir)
        pins = sorted(ir.pins)
        modes = {res.placement.reservations[p].mode for p in pins[:-1]}
        # every pin but the top one has 3 bytes before its neighbour's trampoline
        big = [p for p in pins[:-1] if res.dollops[res.placement.reservations[p].dollop].body_size > 3]
        assert all(res.placement.reservations[p].mode == "short_jump" for p in big)
        assert modes <= {"short_jump", "coalesced"}
        assert layouts.layout_violations(ir) == []


def test_random_layouts_hold_invariants():
    rng = random.Random(6)
    for _ in range(300):
        assert layouts.layout_violations(layouts.random_layout_ir(rng)) == []


def test_checkers_notice_tampering():
    ir = layouts.random_layout_ir(random.Random(7), dense=False)
    res = reconstitute(ir)
    pm = res.placement
    i = next(i for i, ev in enumerate(pm.log) if ev[0] == "bestfit")
    kind, a, n, what = pm.log[i]
    pm.log[i] = (kind, a + 1, n, what)
    assert oracles.replay_layout(ir.text_base, ir.text_size, pm.log)
    assert backend.placement_violations(res.dollops, pm)
    pm.log[i] = (kind, a, n, what)
    rid = next(iter(ir.records))
    at = pm.record_addr[rid] - pm.text_base
    data = bytearray(res.exe.text.data)
    data[at] = 0xFE
    res.exe.text.data = bytes(data)
    assert layouts.relink_mismatches(ir, res)


def test_placement_dump():
    _, _, _, res = rewritten(F.CALL_CHAIN)
    text = res.placement.dump()
    assert text.startswith("text 0x1000+")
    assert "coalesce" in text


class FarAway(LayoutPlugin):
    def __init__(self):
        self.seen = []

    def propose_placement(self, dollop, gaps):
        self.seen.append(dollop.id)
        a, b = gaps[-1]
        return b - dollop.size if b - a >= dollop.size else None


class Outside(LayoutPlugin):
    def propose_placement(self, dollop, gaps):
        return 0x10


def test_plugin_proposals_are_used():
    exe, _, ir, _ = rewritten(F.CALL_CHAIN)
    plugin = FarAway()
    res = reconstitute(ir, [plugin])
    assert plugin.seen
    assert any(kind == "plugin" for kind, *_ in res.placement.log)
    assert vm.run(res.exe).observable == vm.run(exe).observable
    assert backend.placement_violations(res.dollops, res.placement, res.exe.text.data) == []


def test_plugin_outside_free_space():
    _, _, ir, _ = rewritten(F.CALL_CHAIN)
    with pytest.raises(PluginError, match="Outside"):
        reconstitute(ir, [Outside()])


def test_custom_relocation_through_plugin():
    exe, _, ir, _ = rewritten(F.INDIRECT_VIA_TABLE)
    (table,) = ir.data_objects.values()
    table.relocs[0] = dataclasses.replace(table.relocs[0], kind="tagged")

    class Tagger(LayoutPlugin):
        def custom_reloc(self, kind, site, resolved):
            return resolved.to_bytes(4, "little") if kind == "tagged" else None

    res = reconstitute(ir, [Tagger()])
    assert vm.run(res.exe).observable == vm.run(exe).observable
    with pytest.raises(LayoutError, match="tagged"):
        reconstitute(ir)


def test_unplaceable_pin_names_both():
    ir = layouts.random_layout_ir(random.Random(8), dense=False)
    low = min(ir.pins)
    # a second pin one byte above leaves no room for even a short jump
    extra = ir.add_record(I("HALT"))
    ir.pin(extra.id, low + 1)
    with pytest.raises(LayoutError) as e:
        reconstitute(ir)
    assert f"{low:#x}" in str(e.value) and f"{low + 1:#x}" in str(e.value)


def test_instrumented_one_byte_pin_is_reported():
    # the HALT return site has one byte before f's pin: fine until code is added there
    src = """
    .text 0x1000
    main:
        CALL f
        HALT
    f:  MOVI r0, 0
        RET
    .data 0x400000
        .word f
    """
    exe, labels, ir, res = rewritten(src)
    assert vm.run(res.exe).observable == vm.run(exe).observable
    grown = apply_transforms(ir, ["coverage"])
    with pytest.raises(LayoutError, match=r"1 byte\(s\) free") as e:
        reconstitute(grown)
    assert f"{labels['f'] - 1:#x}" in str(e.value) and f"{labels['f']:#x}" in str(e.value)
