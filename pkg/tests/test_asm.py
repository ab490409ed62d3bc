import pytest

from binrewrite.asm import AsmError, Assembler, assemble
from binrewrite.zxe import Instruction, decode_instruction

I = Instruction.of


def decode_all(data):
    out, pos = [], 0
    while pos < len(data):
        ins, n = decode_instruction(data, pos)
        out.append(ins)
        pos += n
    return out


def test_labels_and_branches():
    exe, labels = assemble("""
    .text 0x1000
    main:
        JMP.s end       ; short
        CALL f
    end:
        HALT
    f:  RET
    .data 0x400000
    tab: .word f, end
    """)
    assert labels == {"main": 0x1000, "end": 0x1007, "f": 0x1008, "tab": 0x400000}
    assert decode_all(exe.text.data) == [I("JMP.s", 5), I("CALL", 1), I("HALT"), I("RET")]
    assert exe.data_sections[0].data == (0x1008).to_bytes(4, "little") + (0x1007).to_bytes(4, "little")


def test_memory_operands_and_negative_immediates():
    exe, _ = assemble(".text\n LOAD r1, [sp-8]\n STORE [r2+4], r3\n ADDI sp, -4\n HALT")
    assert decode_all(exe.text.data) == [I("LOAD", 1, 8, -8), I("STORE", 2, 4, 3),
                                         I("ADDI", 8, 0xFFFFFFFC), I("HALT")]


def test_out_of_range_short_branch_is_an_error():
    a = Assembler()
    a.text()
    a.ins("JMP.s", "far")
    a.raw(bytes(200))
    a.label("far")
    a.ins("HALT")
    with pytest.raises(AsmError):
        a.build()


def test_errors_report_line():
    with pytest.raises(AsmError, match="line 2"):
        assemble(".text\n FROB r1\n")
    with pytest.raises(AsmError, match="undefined"):
        assemble(".text\n JMP nowhere\n")
