"""Hand-written ZAR-32 programs shared by the tests."""

from binrewrite.asm import assemble

FACTORIAL = """
.text 0x1000
main:
    MOVI r0, 5
    CALL fact
    SYS 3
    MOVI r0, 0
    HALT
fact:                     ; r0 = n! , recursive
    CMPI r0, 1
    JGE.s recurse
    MOVI r0, 1
    RET
recurse:
    PUSH r4
    MOV r4, r0
    ADDI r0, -1
    CALL fact
    MOVI r1, 0
    MOVI r2, 0
mul:                      ; r1 += r0, r4 times
    CMP r2, r4
    JZ.s mul_done
    ADD r1, r0
    ADDI r2, 1
    JMP.s mul
mul_done:
    MOV r0, r1
    POP r4
    RET
"""

STRAIGHT = """
.text 0x1000
main:
    MOVI r0, 65
    SYS 1
    MOVI r1, 3
    ADD r0, r1
    SYS 1
    MOVI r0, 0
    HALT
"""

DIAMOND = """
.text 0x1000
main:
    SYS 2
    CMPI r0, 5
    JLT less
    MOVI r1, 1
    JMP join
less:
    MOVI r1, 2
join:
    MOV r0, r1
    HALT
"""

WHILE_LOOP = """
.text 0x1000
main:
    MOVI r1, 4
top:
    CMPI r1, 0
    JZ done
    ADDI r1, -1
    JMP top
done:
    MOVI r0, 0
    HALT
"""

NESTED_LOOPS = """
.text 0x1000
main:
    MOVI r6, 3
outer:
    MOVI r7, 2
inner:
    ADDI r1, 1
    ADDI r7, -1
    CMPI r7, 0
    JNZ inner
    ADDI r6, -1
    CMPI r6, 0
    JNZ outer
    MOV r0, r1
    HALT
"""

# three calls: one call graph chain and three return-address pins
CALL_CHAIN = """
.text 0x1000
main:
    CALL f
    CALL f
    SYS 3
    MOVI r0, 0
    HALT
f:
    CALL g
    ADDI r0, 1
    RET
g:
    ADDI r0, 10
    RET
"""

# back edge taken exactly ten times
TRIP10 = """
.text 0x1000
main:
    MOVI r1, 10
loop:
    ADDI r1, -1
    CMPI r1, 0
    JGE loop
    MOVI r0, 0
    HALT
"""

UNINIT_READ = """
.text 0x1000
main:
    CALL f
    SYS 3
    MOVI r0, 0
    HALT
f:
    LOAD r0, [sp-8]
    RET
"""

# f reads the slot g left behind, so zeroing frames changes its output
STALE_READ = """
.text 0x1000
main:
    CALL g
    CALL f
    SYS 3
    MOVI r0, 0
    HALT
g:
    MOVI r1, 77
    STORE [sp-8], r1
    RET
f:
    LOAD r0, [sp-8]
    RET
"""

LEAF = """
.text 0x1000
main:
    CALL leaf
after:
    MOVI r0, 0
    HALT
leaf:
    NOP
    NOP
    RET
"""

FRAMES = """
.text 0x1000
main:
    CALL a
    CALL b
    CALL c
    SYS 3
    MOVI r0, 0
    HALT
a:
    MOVI r1, 1
    STORE [sp-4], r1
    LOAD r0, [sp-4]
    RET
b:
    MOVI r1, 2
    STORE [sp-8], r1
    LOAD r2, [sp-8]
    ADD r0, r2
    RET
c:
    PUSH r4
    MOVI r4, 3
    ADD r0, r4
    POP r4
    RET
"""

DEAD_OVERWRITE = """
.text 0x1000
main:
    MOVI r1, 5
    MOVI r1, 6
    MOVI r0, 0
    SYS 0
    HALT
"""

JUMP_TABLE = """
.text 0x1000
main:
    SYS 2
    MOVI r1, 3
    AND r0, r1
    SHL r0, 2
    ADDI r0, 0x400000
    LOAD r2, [r0+0]
    JMPR r2
    NOP
case0:
    MOVI r0, 10
    HALT
    NOP
    NOP
case1:
    MOVI r0, 11
    HALT
    NOP
    NOP
case2:
    MOVI r0, 12
    HALT
.data 0x400000
table: .word case0, case1, case2, case2
"""

JUNK_BETWEEN = """
.text 0x1000
main:
    CALL f
    HALT
    .byte 0xff
f:
    MOVI r0, 3
    RET
"""

# linear sweep starting in the two stray bytes decodes a MOVI that swallows
# the start of the real stream
DESYNC = """
.text 0x1000
main:
    JMP over
    .byte 0x11, 0x00
over:
    MOVI r0, 5
    SYS 3
    MOVI r0, 0
    HALT
"""

# --- selective CFI -------------------------------------------------------

# JMPR to an address built from two input bytes
ATTACK_JMPR = """
.text 0x1000
main:
    SYS 2
    MOV r3, r0
    SYS 2
    SHL r0, 8
    OR r3, r0
    JMPR r3
safe:
    MOVI r0, 83
    SYS 1
    MOVI r0, 0
    HALT
unused:
    MOVI r0, 1
rogue:
    MOVI r0, 80
    SYS 1
    MOVI r0, 66
    HALT
.data 0x400000
    .word safe
"""

# input overwrites a slot of a function table before the CALLR
ATTACK_TABLE = """
.text 0x1000
main:
    SYS 2
    MOV r3, r0
    SYS 2
    SHL r0, 8
    OR r3, r0
    MOVI r1, 0x400000
    STORE [r1+0], r3
    LOAD r2, [r1+0]
    CALLR r2
    HALT
f:
    MOVI r0, 7
    RET
unused:
    MOVI r0, 1
rogue:
    MOVI r0, 66
    HALT
.data 0x400000
table: .word f
"""

# a function pointer kept in a stack slot is replaced from input
ATTACK_STACK = """
.text 0x1000
main:
    MOVI r3, f
    STORE [sp-4], r3
    SYS 2
    CMPI r0, -1
    JZ go
    MOV r3, r0
    SYS 2
    SHL r0, 8
    OR r3, r0
    STORE [sp-4], r3
go:
    LOAD r2, [sp-4]
    CALLR r2
    SYS 3
    MOVI r0, 0
    HALT
f:
    MOVI r0, 5
    RET
unused:
    MOVI r0, 1
rogue:
    MOVI r0, 66
    HALT
"""

ATTACKS = {"jmpr": ATTACK_JMPR, "table": ATTACK_TABLE, "stack": ATTACK_STACK}

CONST_JMPR = """
.text 0x1000
main:
    MOVI r3, target
    JMPR r3
target:
    MOVI r0, 3
    HALT
"""

CONST_CALLR = """
.text 0x1000
main:
    MOVI r2, f
    CMPI r1, 0
    JZ skip
    NOP
skip:
    CALLR r2
    HALT
f:
    MOVI r0, 4
    RET
"""

# --- backend --------------------------------------------------------------

# the RET at f is address-taken and sits two bytes before another pin
RET_BEFORE_PIN = """
.text 0x1000
main:
    CALL g
    MOVI r0, 0
    HALT
f:
    RET
    .byte 0xff
h:
    MOVI r0, 9
    HALT
g:
    RET
.data 0x400000
    .word f, h
"""

SELF_LOOP = """
.text 0x1000
main:
    MOVI r1, 3
spin:
    ADDI r1, -1
    CMPI r1, 0
    JNZ spin
    MOVI r0, 0
    HALT
"""

INDIRECT_VIA_TABLE = """
.text 0x1000
main:
    MOVI r1, 0x400000
    LOAD r2, [r1+0]
    JMPR r2
target:
    MOVI r0, 7
    HALT
.data 0x400000
table: .word target
"""


def build(source: str):
    """Assemble ``source``; returns (executable, labels)."""
    return assemble(source)


def conflict_program():
    """A MOVI whose immediate bytes also decode as NOP NOP HALT HALT.

    Input 'h' jumps through a data word into the middle of the MOVI, every
    other input runs the MOVI normally.
    """
    template = """
.text 0x1000
main:
    SYS 2
    CMPI r0, 104
    JNZ plain
    MOVI r1, 0x400000
    LOAD r2, [r1+0]
    JMPR r2
plain:
    MOVI r0, 0x101
    SYS 3
    MOVI r0, 0
    HALT
.data 0x400000
table: .word {hidden}
"""
    _, labels = assemble(template.format(hidden=0))
    hidden = labels["plain"] + 2
    exe, labels = assemble(template.format(hidden=hidden))
    labels["hidden"] = hidden
    return exe, labels


def random_instruction(rng, op=None):
    """A well-formed instruction with random operands (and a random opcode
    unless ``op`` is given)."""
    from binrewrite.zxe import OPCODES, SP, Instruction

    if op is None:
        op = rng.choice(sorted(OPCODES))
    form = OPCODES[op][1]
    reg = lambda: rng.randint(0, SP)  # noqa: E731
    if form == "none":
        ops = ()
    elif form == "rr":
        ops = (reg(), reg())
    elif form == "r":
        ops = (reg(),)
    elif form == "ri32":
        ops = (reg(), rng.getrandbits(32))
    elif form == "ri8":
        ops = (reg(), rng.getrandbits(8))
    elif form == "load":
        ops = (reg(), reg(), rng.randint(-0x8000, 0x7FFF))
    elif form == "store":
        ops = (reg(), rng.randint(-0x8000, 0x7FFF), reg())
    elif form == "rel8":
        ops = (rng.randint(-0x80, 0x7F),)
    elif form == "rel32":
        ops = (rng.randint(-0x80000000, 0x7FFFFFFF),)
    else:
        ops = (rng.getrandbits(8),)
    return Instruction(op, ops)
