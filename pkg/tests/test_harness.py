import dataclasses

from binrewrite import harness
from binrewrite.transforms import REGISTRY, Registered

HEADER = ("program,seed,size_class,transforms,input,status,expected,actual,dyn_original,"
          "dyn_rewritten,overhead,text_original,text_rewritten,extension,pins,indirect_sites,error")


def test_csv_header_is_stable(mini_corpus):
    rows, _ = harness.diff_harness(mini_corpus[:2], [[]])
    text = harness.csv_text(rows)
    assert text.splitlines()[0] == HEADER
    assert len(text.splitlines()) == 1 + sum(len(p.inputs) for p in mini_corpus[:2])


def test_report_is_deterministic(mini_corpus, tmp_path):
    lists = [[], ["kill_deads"], ["p1_pad:seed=2"]]
    a, _ = harness.diff_harness(mini_corpus[:6], lists)
    b, _ = harness.diff_harness(mini_corpus[:6], lists)
    harness.write_csv(a, tmp_path / "a.csv")
    harness.write_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_parallel_report_matches_serial(mini_corpus):
    a, _ = harness.diff_harness(mini_corpus[:6], [[], ["coverage"]])
    b, _ = harness.diff_harness(mini_corpus[:6], [[], ["coverage"]], workers=2)
    assert harness.csv_text(a) == harness.csv_text(b)


def test_zero_transform_summary(mini_corpus):
    rows, (s,) = harness.diff_harness(mini_corpus, [[]])
    assert s.transforms == "none" and s.passed == s.runs == len(rows)
    assert s.median_overhead <= 0.05
    assert all(r.overhead == (r.dyn_rewritten - r.dyn_original) / r.dyn_original for r in rows)


def test_mismatch_is_reported(mini_corpus):
    p = mini_corpus[0]
    fake = dataclasses.replace(p.expected[0], code=p.expected[0].code + 1)
    bad = dataclasses.replace(p, expected=[fake] + p.expected[1:])
    rows = harness.check_program(bad, [])
    assert rows[0].status == "mismatch" and rows[1].status == "pass"


def test_failed_rewrite_is_a_row(mini_corpus, monkeypatch):
    def explode(ir):
        raise RuntimeError("boom")

    monkeypatch.setitem(REGISTRY, "explode", Registered(explode, {}, ""))
    rows = harness.check_program(mini_corpus[0], ["explode"])
    assert {r.status for r in rows} == {"error"}
    assert "boom" in rows[0].error


def test_summary_text(mini_corpus):
    _, (s,) = harness.diff_harness(mini_corpus[:3], [["kill_deads"]])
    text = harness.format_summary(s)
    assert text.startswith("kill_deads: pass ") and "100.0%" in text
