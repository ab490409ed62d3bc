"""Differential testing and overhead measurement over a generated corpus.

For every program and transform list the program is lifted, transformed,
laid out again and run on each of its inputs next to the expected result.
One CSV row is written per (program, transform list, input).
"""

from __future__ import annotations

import csv
import io
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

from . import backend, transforms, vm
from .corpus import CorpusProgram
from .frontend import lift

CSV_FIELDS = [
    "program", "seed", "size_class", "transforms", "input", "status",
    "expected", "actual", "dyn_original", "dyn_rewritten", "overhead",
    "text_original", "text_rewritten", "extension", "pins", "indirect_sites", "error",
]


@dataclass
class Row:
    program: str
    seed: int
    size_class: str
    transforms: str
    input: int
    status: str                  # pass, mismatch, error
    expected: str
    actual: str
    dyn_original: int
    dyn_rewritten: int
    overhead: float
    text_original: int
    text_rewritten: int
    extension: int
    pins: int
    indirect_sites: int
    error: str = ""


@dataclass
class Summary:
    transforms: str
    runs: int
    passed: int
    median_overhead: float
    max_overhead: float
    median_expansion: float
    max_expansion: float

    @property
    def pass_rate(self) -> float:
        return self.passed / self.runs if self.runs else 0.0


def label(specs) -> str:
    return "+".join(str(s) for s in specs) or "none"


def rewrite(exe, specs, plugins=()) -> backend.BackendResult:
    ir = lift(exe)
    ir = transforms.apply_transforms(ir, specs)
    return backend.reconstitute(ir, plugins)


def check_program(program: CorpusProgram, specs, step_limit: int = vm.DEFAULT_STEP_LIMIT) -> list[Row]:
    name = label(specs)
    base = dict(program=program.name, seed=program.seed, size_class=program.size_class,
                transforms=name, text_original=len(program.exe.text.data),
                pins=program.stats.get("pins", 0),
                indirect_sites=program.stats.get("indirect_sites", 0))
    try:
        res = rewrite(program.exe, specs)
    except Exception as e:  # a failed rewrite is a report row, not a crash
        return [Row(**base, input=i, status="error", expected=exp.describe(), actual="-",
                    dyn_original=exp.dynamic_count, dyn_rewritten=0, overhead=0.0,
                    text_rewritten=0, extension=0, error=f"{type(e).__name__}: {e}")
                for i, exp in enumerate(program.expected)]
    rows = []
    for i, (inp, exp) in enumerate(zip(program.inputs, program.expected)):
        got = vm.run(res.exe, inp, step_limit)
        ok = got.observable == exp.observable
        overhead = (got.dynamic_count - exp.dynamic_count) / exp.dynamic_count
        rows.append(Row(**base, input=i, status="pass" if ok else "mismatch",
                        expected=exp.describe(), actual=got.describe(),
                        dyn_original=exp.dynamic_count, dyn_rewritten=got.dynamic_count,
                        overhead=overhead, text_rewritten=len(res.exe.text.data),
                        extension=res.placement.extension_size))
    return rows


def _job(args):
    program, specs, step_limit = args
    return check_program(program, specs, step_limit)


def diff_harness(corpus: list[CorpusProgram], transform_lists, workers: int = 1,
                 step_limit: int = vm.DEFAULT_STEP_LIMIT) -> tuple[list[Row], list[Summary]]:
    lists = [[transforms.TransformSpec.parse(s) if isinstance(s, str) else s for s in specs]
             for specs in transform_lists]
    jobs = [(p, specs, step_limit) for specs in lists for p in corpus]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            chunks = list(pool.map(_job, jobs, chunksize=4))
    else:
        chunks = [_job(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    order = {label(s): i for i, s in enumerate(lists)}
    rows.sort(key=lambda r: (order[r.transforms], r.program, r.input))
    return rows, [summarize(rows, label(s)) for s in lists]


def summarize(rows: list[Row], name: str) -> Summary:
    mine = [r for r in rows if r.transforms == name]
    over = [r.overhead for r in mine if r.status != "error"] or [0.0]
    seen = {}
    for r in mine:
        if r.status != "error":
            seen[r.program] = r.text_rewritten / r.text_original - 1
    expansion = list(seen.values()) or [0.0]
    return Summary(name, len(mine), sum(r.status == "pass" for r in mine),
                   statistics.median(over), max(over),
                   statistics.median(expansion), max(expansion))


def csv_text(rows: list[Row]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = asdict(r)
        d["overhead"] = f"{r.overhead:.6f}"
        w.writerow(d)
    return buf.getvalue()


def write_csv(rows: list[Row], path) -> None:
    with open(path, "w", newline="") as f:
        f.write(csv_text(rows))


def format_summary(s: Summary) -> str:
    return (f"{s.transforms}: pass {s.passed}/{s.runs} ({100 * s.pass_rate:.1f}%), "
            f"overhead median {100 * s.median_overhead:.2f}% max {100 * s.max_overhead:.2f}%, "
            f"text growth median {100 * s.median_expansion:.1f}% max {100 * s.max_expansion:.1f}%")
