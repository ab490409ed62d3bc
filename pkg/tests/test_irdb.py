import copy
import random

import pytest

from binrewrite import irdb
from binrewrite.asm import assemble
from binrewrite.frontend import lift
from binrewrite.irdb import (
    DataObject, FunctionRecord, InstructionRecord, IRError, ProgramIR, Relocation,
    dumps_ir, isomorphic, load_ir, loads_ir, save_ir, validate_ir,
)
from binrewrite.zxe import Instruction

import fixtures as F

I = Instruction.of


def lifted(src=F.FACTORIAL):
    return lift(assemble(src)[0])


def function_at(ir, src, label):
    addr = assemble(src)[1][label]
    return next(f for f in ir.functions.values() if ir.records[f.head].original_address == addr)


def renumber(ir: ProgramIR, seed: int) -> ProgramIR:
    """Same program under a random permutation of identities."""
    ids = sorted(ir.records) + sorted(ir.functions) + sorted(ir.data_objects)
    fresh = list(range(1000, 1000 + len(ids)))
    random.Random(seed).shuffle(fresh)
    m = dict(zip(ids, fresh))
    g = lambda x: None if x is None else m[x]  # noqa: E731
    out = ProgramIR(text_base=ir.text_base, text_size=ir.text_size,
                    entry_address=ir.entry_address, blobs=list(ir.blobs),
                    metadata=dict(ir.metadata), next_id=2000 + len(ids))
    for r in ir.records.values():
        out.records[m[r.id]] = InstructionRecord(m[r.id], r.instr, r.original_address,
                                                 g(r.target_id), g(r.fallthrough_id),
                                                 r.pinned_at, g(r.function_id), r.origin)
    for f in ir.functions.values():
        out.functions[m[f.id]] = FunctionRecord(m[f.id], m[f.head], {m[x] for x in f.members}, f.name)
    re = lambda r: Relocation(r.kind, r.site_kind, m[r.site_id], r.offset, m[r.referent])  # noqa: E731
    for d in ir.data_objects.values():
        out.data_objects[m[d.id]] = DataObject(m[d.id], d.vaddr, d.data, [re(r) for r in d.relocs], d.origin)
    out.relocs = [re(r) for r in ir.relocs]
    out.pins = {a: m[r] for a, r in ir.pins.items()}
    out.entry_record = m[ir.entry_record]
    return out


def test_round_trip_is_isomorphic(tmp_path):
    ir = lifted(F.JUMP_TABLE)
    save_ir(ir, tmp_path / "a.irdb")
    back = load_ir(tmp_path / "a.irdb")
    assert isomorphic(ir, back)
    assert dumps_ir(back) == dumps_ir(ir)


def test_save_is_deterministic(tmp_path):
    ir = lifted()
    save_ir(ir, tmp_path / "a")
    save_ir(ir, tmp_path / "b")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_renumbering_is_isomorphic():
    ir = lifted(F.CALL_CHAIN)
    other = renumber(ir, 3)
    assert isomorphic(ir, other)
    assert validate_ir(other) == []
    assert isomorphic(ir, loads_ir(dumps_ir(other)))


def test_isomorphism_sees_differences():
    ir = lifted(F.CALL_CHAIN)
    other = copy.deepcopy(ir)
    rid = next(r.id for r in other.records.values() if r.instr.mnemonic == "ADDI")
    other.records[rid].instr = I("ADDI", 0, 2)
    assert not isomorphic(ir, other)
    swapped = copy.deepcopy(ir)
    call = next(r for r in swapped.records.values() if r.instr.mnemonic == "CALL")
    g_head = function_at(swapped, F.CALL_CHAIN, "g").head
    call.target_id = g_head
    assert not isomorphic(ir, swapped)


def test_dangling_reference_rejected():
    text = dumps_ir(lifted()).splitlines()
    i = next(i for i, line in enumerate(text) if line.startswith("rec ") and "tgt=-" in line)
    text[i] = text[i].replace("tgt=-", "tgt=99999")
    with pytest.raises(IRError, match="dangling"):
        loads_ir("\n".join(text))


def test_version_mismatch_rejected():
    text = dumps_ir(lifted())
    with pytest.raises(IRError, match="version"):
        loads_ir(text.replace("IRDB v1", "IRDB v2", 1))


def test_duplicate_pin_rejected_on_load():
    ir = lifted()
    text = dumps_ir(ir).splitlines()
    unpinned = next(i for i, line in enumerate(text) if line.startswith("rec ") and "pin=-" in line)
    text[unpinned] = text[unpinned].replace("pin=-", f"pin={ir.entry_address:#x}")
    with pytest.raises(IRError, match="duplicate pin"):
        loads_ir("\n".join(text))


def test_lifted_ir_validates():
    for src in (F.FACTORIAL, F.JUMP_TABLE, F.DESYNC, F.JUNK_BETWEEN, F.ATTACK_STACK):
        assert validate_ir(lifted(src)) == []


def test_ret_with_fallthrough_is_one_violation():
    ir = lifted()
    ret = next(r for r in ir.records.values() if r.instr.mnemonic == "RET")
    ret.fallthrough_id = ir.entry_record
    problems = validate_ir(ir)
    assert len(problems) == 1
    assert problems[0].records == (ret.id,) and str(ret.id) in str(problems[0])


def test_duplicate_pin_violation():
    ir = lifted()
    other = next(r for r in ir.records.values() if r.pinned_at is None)
    other.pinned_at = ir.entry_address
    assert "duplicate-pin" in {v.code for v in validate_ir(ir)}


def test_unpinned_return_address_violation():
    ir = lifted(F.CALL_CHAIN)
    call = next(r for r in ir.records.values() if r.instr.mnemonic == "CALL")
    ret_site = ir.records[call.fallthrough_id]
    del ir.pins[ret_site.pinned_at]
    ret_site.pinned_at = None
    assert any(v.code == "unpinned-return" and v.records[0] == call.id for v in validate_ir(ir))


def test_conditional_needs_both_links():
    ir = lifted(F.DIAMOND)
    jlt = next(r for r in ir.records.values() if r.instr.mnemonic == "JLT")
    jlt.target_id = None
    problems = {v.code: v.records for v in validate_ir(ir)}
    assert problems["missing-target"] == (jlt.id,)
    # the taken side is now cut off from the function head as well
    assert set(problems) == {"missing-target", "function-disconnected"}


def test_insert_before_redirects_references():
    ir = lifted(F.CALL_CHAIN)
    g = function_at(ir, F.CALL_CHAIN, "g")
    callers = [r.id for r in ir.records.values() if r.target_id == g.head]
    moved = ir.insert_before(g.head, [I("NOP"), I("NOP")], origin="test")
    assert ir.records[g.head].instr == I("NOP") and ir.records[g.head].origin == "test"
    assert ir.records[moved].instr == I("ADDI", 0, 10)
    assert all(ir.records[c].target_id == g.head for c in callers)
    assert ir.records[ir.records[g.head].fallthrough_id].fallthrough_id == moved
    assert moved in g.members
    assert validate_ir(ir) == []


def test_insert_before_internal_branch_targets():
    ir = lifted(F.LEAF)
    ret = next(r.id for r in ir.records.values() if r.instr.mnemonic == "RET")
    moved = ir.insert_before(ret, [I("CMPI", 0, 0), (I("JZ", 0), 3), I("NOP")])
    jz = ir.records[ir.records[ret].fallthrough_id]
    assert jz.target_id == moved
    assert validate_ir(ir) == []


def test_data_relocation_offsets_within_object():
    ir = lifted(F.JUMP_TABLE)
    (d,) = ir.data_objects.values()
    d.relocs.append(Relocation(irdb.DATA_TO_INSTRUCTION, "data", d.id, len(d.data) - 2, ir.entry_record))
    assert any("reloc" in str(v) for v in validate_ir(ir))


def test_corpus_round_trip(mini_corpus):
    for p in mini_corpus:
        ir = lift(p.exe)
        assert validate_ir(ir) == []
        assert isomorphic(ir, loads_ir(dumps_ir(ir)))
