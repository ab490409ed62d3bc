"""Command line driver: ``binrewrite <command> ...``.

Exit status is 0 on success, 1 when a pipeline stage fails and 2 when an IR
or a rewritten program fails validation.  ``run`` exits with the program's
own exit code (low 8 bits).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from . import analyses, backend, corpus, harness, irdb, transforms, vm, zxe
from .frontend import lift

EXIT_STAGE = 1
EXIT_VALIDATION = 2


class ValidationFailure(Exception):
    pass


def _transform_specs(args, default_seed: int | None = None) -> list[transforms.TransformSpec]:
    """Parse ``--transform`` flags; ``default_seed`` fills in unset ``seed`` options."""
    specs = [transforms.TransformSpec.parse(t) for t in args.transform or []]
    if default_seed is not None:
        for s in specs:
            reg = transforms.REGISTRY.get(s.name)
            if reg is not None and "seed" in reg.defaults:
                s.options.setdefault("seed", str(default_seed))
    return specs


def cmd_lift(args) -> int:
    exe = zxe.read_executable(args.input)
    ir = lift(exe, source=os.path.basename(args.input), seed=args.seed)
    problems = irdb.validate_ir(ir)
    if problems:
        raise ValidationFailure("\n".join(map(str, problems)))
    irdb.save_ir(ir, args.output)
    print(f"{len(ir.records)} records, {len(ir.functions)} functions, {len(ir.pins)} pins")
    return 0


def cmd_rewrite(args) -> int:
    exe = zxe.read_executable(args.input)
    ir = lift(exe, source=os.path.basename(args.input), seed=args.seed)
    ir = transforms.apply_transforms(ir, _transform_specs(args, args.seed))
    res = backend.reconstitute(ir)
    image = res.exe.text.data
    problems = backend.placement_violations(res.dollops, res.placement, image)
    if problems:
        raise ValidationFailure("\n".join(problems))
    zxe.write_executable(res.exe, args.output)
    if args.dump_placement:
        text = res.placement.dump()
        if args.dump_placement == "-":
            sys.stdout.write(text)
        else:
            with open(args.dump_placement, "w") as f:
                f.write(text)
    print(f"text {len(exe.text.data)} -> {len(image)} bytes "
          f"(extension {res.placement.extension_size}), {len(res.dollops)} dollops",
          file=sys.stderr)
    return 0


def cmd_run(args) -> int:
    exe = zxe.read_executable(args.input)
    data = sys.stdin.buffer.read() if args.stdin else b""
    result = vm.run(exe, data, args.step_limit)
    sys.stdout.buffer.write(result.output)
    sys.stdout.flush()
    if args.count:
        print(f"dynamic instructions: {result.dynamic_count}", file=sys.stderr)
    if result.outcome != "exit":
        print(f"binrewrite: program stopped: {result.describe()}", file=sys.stderr)
        return EXIT_STAGE
    return result.code & 0xFF


def _pick_function(ir, which: str):
    funcs = sorted(ir.functions.values(), key=lambda f: (ir.records[f.head].original_address or 0, f.id))
    for f in funcs:
        if f.name == which or str(f.id) == which:
            return f
    if which.startswith("f") and which[1:].isdigit() and int(which[1:]) < len(funcs):
        return funcs[int(which[1:])]
    names = ", ".join(f.name or str(f.id) for f in funcs)
    raise KeyError(f"no function {which!r}; available: {names}")


def _block_name(cfg, ir, b):
    head = ir.records[cfg.blocks[b].head]
    at = f"@{head.original_address:#x}" if head.original_address is not None else ""
    return f"B{b}{at}"


def analysis_text(ir, which: str, function: str | None) -> str:
    out = []
    if which == "callgraph":
        g = analyses.call_graph(ir)
        for fid in sorted(g, key=lambda i: ir.functions[i].name or ""):
            callees = sorted(ir.functions[c].name or str(c) for c in g[fid])
            out.append(f"{ir.functions[fid].name} -> {', '.join(callees) or '-'}")
        return "\n".join(out) + "\n"
    f = _pick_function(ir, function or "main")
    cfg = analyses.build_cfg(ir, f)
    name = lambda b: _block_name(cfg, ir, b)  # noqa: E731
    if which == "cfg":
        for b in cfg.blocks:
            succ = [f"{name(t)}({k})" for s, t, k in cfg.edges if s == b.index]
            out.append(f"{name(b.index)} records={','.join(map(str, b.records))} -> {' '.join(succ) or '-'}")
    elif which == "dominators":
        dom = analyses.dominators(cfg)
        for b in sorted(dom.parent):
            p = dom.parent[b]
            out.append(f"idom({name(b)}) = {name(p) if p is not None else '-'}")
        for b in sorted(dom.unreachable):
            out.append(f"unreachable {name(b)}")
    elif which == "loops":
        dom = analyses.dominators(cfg)
        heads = sorted(analyses.loop_headers(cfg, dom))
        out.append("loop headers: " + (" ".join(name(h) for h in heads) or "-"))
    elif which == "liveness":
        res = analyses.dead_registers(ir, f, cfg)
        regs = lambda s: ",".join("sp" if r == zxe.SP else f"r{r}" for r in sorted(s)) or "-"  # noqa: E731
        for b in cfg.blocks:
            for rid in b.records:
                rec = ir.records[rid]
                out.append(f"{rid:>6} {zxe.format_instruction(rec.instr):<24} "
                           f"live={regs(res.live_in[rid])} dead={regs(res.dead_in[rid])}")
    else:
        raise KeyError(f"unknown analysis {which!r}")
    return f"function {f.name}\n" + "\n".join(out) + "\n"


def cmd_analyze(args) -> int:
    ir = irdb.load_ir(args.input)
    sys.stdout.write(analysis_text(ir, args.which, args.function))
    return 0


def cmd_transforms(args) -> int:
    print(transforms.describe())
    return 0


def cmd_gen_corpus(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    programs = corpus.gen_corpus(args.seed, args.count, args.size, args.step_limit)
    with open(os.path.join(args.out, "manifest.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["program", "seed", "size_class", "input", "input_hex", "expected",
                    "output_hex", "dynamic_count", "instructions", "pins", "indirect_sites"])
        for p in programs:
            zxe.write_executable(p.exe, os.path.join(args.out, f"{p.name}.zxe"))
            for i, (inp, exp) in enumerate(zip(p.inputs, p.expected)):
                w.writerow([p.name, p.seed, p.size_class, i, inp.hex(), exp.describe(),
                            exp.output.hex(), exp.dynamic_count, p.stats["instructions"],
                            p.stats["pins"], p.stats["indirect_sites"]])
    print(f"wrote {len(programs)} programs to {args.out}")
    return 0


def cmd_harness(args) -> int:
    programs = corpus.gen_corpus(args.seed, args.count, args.size)
    lists = [_transform_specs(args)]
    rows, summaries = harness.diff_harness(programs, lists, workers=args.workers,
                                           step_limit=args.step_limit)
    if args.report:
        harness.write_csv(rows, args.report)
    for s in summaries:
        print(harness.format_summary(s))
    return 0 if all(s.passed == s.runs for s in summaries) else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="binrewrite", description="Static rewriter for ZXE executables.")
    sub = p.add_subparsers(dest="command", required=True)

    def transform_flag(sp):
        sp.add_argument("--transform", action="append", metavar="NAME[:K=V,...]",
                        help="apply a transform; repeat for several, applied in order")

    sp = sub.add_parser("lift", help="lift an executable into an IRDB file")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_lift)

    sp = sub.add_parser("rewrite", help="lift, transform and re-emit an executable")
    sp.add_argument("input")
    sp.add_argument("output")
    transform_flag(sp)
    sp.add_argument("--seed", type=int, help="seed for every transform that takes one and sets none")
    sp.add_argument("--dump-placement", metavar="FILE", help="write the allocation log ('-' for stdout)")
    sp.set_defaults(func=cmd_rewrite)

    sp = sub.add_parser("run", help="run an executable in the emulator")
    sp.add_argument("input")
    sp.add_argument("--step-limit", type=int, default=vm.DEFAULT_STEP_LIMIT)
    sp.add_argument("--no-stdin", dest="stdin", action="store_false", help="run with empty input")
    sp.add_argument("--count", action="store_true", help="report the dynamic instruction count")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("analyze", help="dump an analysis of an IRDB file")
    sp.add_argument("input")
    sp.add_argument("which", choices=["cfg", "dominators", "callgraph", "liveness", "loops"])
    sp.add_argument("function", nargs="?", help="function name, id or fN (N-th by address)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("transforms", help="list registered transforms and their options")
    sp.set_defaults(func=cmd_transforms)

    sp = sub.add_parser("gen-corpus", help="generate test programs with expected outputs")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--size", default="mixed", choices=["mixed", *corpus.SIZE_LIMITS])
    sp.add_argument("--step-limit", type=int, default=corpus.GEN_STEP_LIMIT)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("harness", help="differential test a transform list over a corpus")
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--count", type=int, default=50)
    sp.add_argument("--size", default="mixed", choices=["mixed", *corpus.SIZE_LIMITS])
    transform_flag(sp)
    sp.add_argument("--step-limit", type=int, default=vm.DEFAULT_STEP_LIMIT)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--report", metavar="CSV")
    sp.set_defaults(func=cmd_harness)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationFailure, transforms.TransformValidationError) as e:
        print(f"binrewrite: validation failed: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, ValueError, KeyError, zxe.FormatError, irdb.IRError,
            transforms.TransformError, backend.LayoutError, corpus.GenerationError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"binrewrite: {args.command} failed: {msg}", file=sys.stderr)
        return EXIT_STAGE
