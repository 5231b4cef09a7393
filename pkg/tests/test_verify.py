import json

import numpy as np
import pytest

from tensorized_transformer import attention as att
from tensorized_transformer.cli import main
from tensorized_transformer.verify import SUITES, run_suites


def test_all_suites_pass_at_seed_7():
    results = run_suites("all", seed=7, trials=100)
    assert {r.suite for r in results} == set(SUITES)
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed


def test_selector_isolates_suites():
    results = run_suites("corollary", seed=0, trials=5)
    assert {r.suite for r in results} == {"corollary"}
    two = run_suites("tucker,compression", seed=0, trials=5)
    assert {r.suite for r in two} == {"tucker", "compression"}
    with pytest.raises(KeyError):
        run_suites("nope")


def test_suites_are_deterministic():
    a = [(r.name, r.max_error) for r in run_suites("collapse,theorem", seed=3, trials=10)]
    b = [(r.name, r.max_error) for r in run_suites("collapse,theorem", seed=3, trials=10)]
    assert a == b


def test_cli_verify_report(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert main(["verify", "--suite", "corollary", "--trials", "10", "--seed", "1", "--json", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed.count("[PASS]") == 2
    rows = json.loads(out.read_text())
    assert all(r["passed"] and r["suite"] == "corollary" for r in rows)


def test_cli_unknown_suite_is_usage_error():
    assert main(["verify", "--suite", "bogus"]) == 2


def test_sign_flip_mutation_is_caught(monkeypatch):
    real = att.single_block_tensor

    def flipped(w, Qp, Kp, Vp):
        return -real(w, Qp, Kp, Vp)

    monkeypatch.setattr(att, "single_block_tensor", flipped)
    results = run_suites("tucker,corollary", seed=7, trials=20)
    assert not all(r.passed for r in results)
    assert main(["verify", "--suite", "tucker", "--trials", "20", "--seed", "7"]) == 1


def test_crash_in_property_counts_as_failure(monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(att, "row_coupled_tensor", broken)
    results = run_suites("corollary", seed=0, trials=3)
    bad = [r for r in results if not r.passed]
    assert bad and "boom" in bad[0].name and not np.isfinite(bad[0].max_error)
