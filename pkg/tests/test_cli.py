import json

import numpy as np
import pytest

from dynts import acceptance, report
from dynts.acceptance import CheckResult
from dynts.cli import ConfigError, RunConfig, main, parse_config
from dynts.numkernel import MlpParams
from dynts.predictor import load_checkpoint
from dynts.synthdata import Vocab

SCRIPTED = "model = scripted\nn_layers = 2\nn_heads = 2\nd_model = 16\neps = 0.1\n"


def _cfg(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return str(p)


def test_parse_config_types_and_errors():
    cfg = parse_config("n = 7\nratio = 0.5  # comment\nmodel = scripted\n")
    assert cfg.n == 7 and cfg.ratio == 0.5 and cfg.model == "scripted"
    with pytest.raises(ConfigError, match="'ratio'"):
        parse_config("ratio = 1.5")
    with pytest.raises(ConfigError, match="'bogus'"):
        parse_config("bogus = 1")
    with pytest.raises(ConfigError, match="'n'"):
        parse_config("n = many")
    with pytest.raises(ConfigError, match="retention_p"):
        parse_config("retention_p = 0,200")


def test_gen_deterministic(tmp_path, capsys):
    cfg = _cfg(tmp_path, "n = 10\n")
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "dataset.jsonl").read_bytes()
    assert len(a.splitlines()) == 10
    assert a == (tmp_path / "b" / "dataset.jsonl").read_bytes()
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["count"] == 10
    assert main(["gen", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "3"]) == 0
    assert (tmp_path / "c" / "dataset.jsonl").read_bytes() != a


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    assert main(["gen", "--config", _cfg(tmp_path, "budget = -3\n"), "--out", str(tmp_path)]) == 2
    assert "'budget'" in capsys.readouterr().err
    assert main(["trace", "--out", str(tmp_path / "nothing")]) == 2


def test_scripted_pipeline(tmp_path):
    cfg = _cfg(tmp_path, SCRIPTED + "n = 5\nepochs = 3\n")
    out = tmp_path / "run"
    assert main(["gen", "--config", cfg, "--out", str(out)]) == 0
    assert main(["trace", "--config", cfg, "--out", str(out)]) == 0
    assert len(list((out / "traces").glob("scores_*.csv"))) == 5
    rows = (out / "scores.csv").read_text().splitlines()
    assert rows[0] == "trace_id,position,segment,token,raw_I,label,critical_gt"
    assert main(["train", "--config", cfg, "--out", str(out)]) == 0
    assert len((out / "history.csv").read_text().splitlines()) == 1 + 3
    for pol in ("full", "dynts"):
        assert main(["infer", "--config", cfg, "--out", str(out), "--policy", pol]) == 0
    full = json.loads((out / "infer_full" / "summary.json").read_text())
    assert full["accuracy"] == 1.0
    lines = (out / "infer_dynts" / "evictions.jsonl").read_text().splitlines()
    assert lines and json.loads(lines[0])["policy"] == "dynts"


def test_trace_skips_malformed_instances(tmp_path):
    cfg = _cfg(tmp_path, SCRIPTED + "n = 3\n")
    out = tmp_path / "run"
    main(["gen", "--config", cfg, "--out", str(out)])
    lines = (out / "dataset.jsonl").read_text().splitlines()
    bad = json.loads(lines[1])
    bad["trace"], bad["critical_mask"] = bad["trace"] + [Vocab.THINK_CLOSE], bad["critical_mask"] + [False]
    lines[1] = json.dumps(bad)
    (out / "dataset.jsonl").write_text("\n".join(lines) + "\n")
    assert main(["trace", "--config", cfg, "--out", str(out)]) == 0
    assert json.loads((out / "trace_summary.json").read_text()) == {"skipped": 1, "traces": 2}


def test_train_zero_epochs_keeps_seeded_init(tmp_path):
    cfg = _cfg(tmp_path, SCRIPTED + "n = 4\nepochs = 0\n")
    out = tmp_path / "run"
    for cmd in ("gen", "trace", "train"):
        assert main([cmd, "--config", cfg, "--out", str(out)]) == 0
    ck = load_checkpoint(out / "predictor.json")
    init = MlpParams.init(16, np.random.default_rng([0, 0x7A1]))
    for k, a in init.items():
        np.testing.assert_array_equal(getattr(ck, k), a)
    assert len((out / "history.csv").read_text().splitlines()) == 1


@pytest.fixture(scope="module")
def planted_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("planted")
    cfg = out / "run.cfg"
    cfg.write_text("n = 12\nepochs = 2\nretention_p = 30,100\n")
    for cmd in ("gen", "trace", "train", "retention"):
        assert main([cmd, "--config", str(cfg), "--out", str(out)]) == 0
    return out, str(cfg)


def test_planted_infer_and_equivalence(planted_run, tmp_path):
    out, cfg = planted_run
    assert main(["infer", "--config", cfg, "--out", str(out), "--policy", "full"]) == 0
    assert json.loads((out / "infer_full" / "summary.json").read_text())["accuracy"] == 1.0
    big = _cfg(tmp_path, "n = 12\nbudget = 400\n")
    assert main(["infer", "--config", big, "--out", str(out), "--policy", "dynts"]) == 0
    full = (out / "infer_full" / "results.csv").read_text()
    dyn = (out / "infer_dynts" / "results.csv").read_text()
    assert full == dyn
    assert (out / "infer_dynts" / "evictions.jsonl").read_text() == ""


def test_retention_csv(planted_run):
    out, _ = planted_run
    rows = [r.split(",") for r in (out / "retention.csv").read_text().splitlines()[1:]]
    ref = float(rows[0][2])
    for s, p, acc, _ in rows[1:]:
        if float(p) == 100:
            assert float(acc) == ref
    top30 = [float(a) for s, p, a, _ in rows if s == "top" and float(p) == 30][0]
    assert ref - top30 <= 0.05


def test_report(planted_run, tmp_path, capsys):
    out, cfg = planted_run
    assert main(["report", "--out", str(tmp_path / "empty"), "--skip-acceptance"]) == 2
    err = capsys.readouterr().err
    assert "retention.csv" in err and "history.csv" in err and "infer_" in err
    main(["infer", "--config", cfg, "--out", str(out), "--policy", "window"])
    assert main(["report", "--config", cfg, "--out", str(out), "--skip-acceptance"]) == 0
    first = {p.name: p.read_bytes() for p in (out / "report").iterdir()}
    assert main(["report", "--config", cfg, "--out", str(out), "--skip-acceptance"]) == 0
    assert first == {p.name: p.read_bytes() for p in (out / "report").iterdir()}
    for name in ("retention_curves.csv", "training_curves.csv", "policy_comparison.csv", "sawtooth.csv", "report.md"):
        assert name in first


def test_report_acceptance_section(planted_run, monkeypatch):
    out, _ = planted_run
    fake = {n: (lambda n=n: CheckResult(n, f"check {n}", n != 4, {"value": float(n)})) for n in range(1, 11)}
    monkeypatch.setattr(acceptance, "CHECKS", fake)
    status = report.write_report(RunConfig(), out, run_acceptance=True)
    md = (out / "report" / "report.md").read_text()
    assert status == 1
    for n in range(1, 11):
        assert f"| {n} | check {n} |" in md
    assert "| 4 | check 4 | FAIL | value=4 |" in md
