import json

import pytest

import leakprobe


def record(sid, label, lps):
    loss = -sum(lps) / len(lps)
    tokens = [{"lp": lp, "mu": -3.0, "sigma": 1.0} for lp in lps]
    return json.dumps({
        "sample_id": sid,
        "label": label,
        "zlib_len": 10,
        "n_tokens": len(lps) + 1,
        "traces": {"target": {"loss": loss, "tokens": tokens}},
    })


TRACES = "\n".join([
    json.dumps({"format": "leakprobe-trace/1", "meta": {}}),
    record("m0", "member", [-0.5]),
    record("m1", "member", [-1.0]),
    record("n0", "nonmember", [-1.0]),
    record("n1", "nonmember", [-2.0]),
]) + "\n"


def test_roc_auc_and_ci():
    assert leakprobe.roc_auc([2, 1], [1, 0]) == 0.875
    lo, hi = leakprobe.bootstrap_ci([2, 3], [0, 1], 100, 7)
    assert (lo, hi) == (1.0, 1.0)
    with pytest.raises(leakprobe.AttackError):
        leakprobe.roc_auc([], [1.0])


def test_evaluate_matches_hand_computation(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text(TRACES)
    report = leakprobe.evaluate(path)
    loss = next(a for a in report["attacks"] if a["attack"] == "loss")
    assert loss["auc"] == 0.875
    assert report["utility"]["ppl_ft"] == 0.75
    assert report["utility"]["ppl_val"] == 1.5


def test_score_columns():
    rows = leakprobe.score(TRACES)
    assert [r["sample_id"] for r in rows] == ["m0", "m1", "n0", "n1"]
    assert float(rows[0]["loss"]) == -0.5
    assert rows[0]["loss_pt"] == ""


def test_invalid_traces_raise():
    bad = TRACES.replace('"loss": 0.5', '"loss": 0.9')
    with pytest.raises(leakprobe.ValidationError, match="m0"):
        leakprobe.normalize_traces(bad)
    with pytest.raises(leakprobe.ParseError):
        leakprobe.normalize_traces("not json\n")


def test_cli_in_process(tmp_path):
    code, out, _ = leakprobe.run_cli(["--version"])
    assert code == 0 and leakprobe.__version__ in out
    code, _, _ = leakprobe.run_cli(["bogus"])
    assert code == 2
    code, _, _ = leakprobe.run_cli(["--out-dir", str(tmp_path), "synth", "--seed", "3", "--count", "5",
                                    "--out", "c.txt"])
    assert code == 0
    assert len((tmp_path / "c.txt").read_text().splitlines()) == 5
    assert (tmp_path / "c.txt.manifest.json").exists()


def test_zlib_entropy():
    assert leakprobe.zlib_entropy("") == 8
    assert leakprobe.zlib_entropy("a" * 1000) == 17
