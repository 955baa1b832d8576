import hashlib
import json

import pytest

from mrif import cli
from mrif.errors import NonFiniteError
from mrif.evaluation import EvalReport
from mrif.synthetic import SyntheticSpec, generate_sequences

TINY = ["--epochs-pretrain", "1", "--epochs-train", "1", "--quiet"]


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("# small and fast\nsynthetic.num_users = 60\nd = 8\nn = 10\nbatch_size = 32\nnegatives = 20\n")
    return str(path)


@pytest.fixture
def tsv(tmp_path):
    spec = SyntheticSpec(num_users=300, num_categories=15)
    lines = [f"u{u}\ti{item}\t{t}" for u, seq in enumerate(generate_sequences(spec, 0)) for t, item in enumerate(seq)]
    path = tmp_path / "log.tsv"
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_prepare_is_idempotent(tsv, tmp_path, capsys):
    out = str(tmp_path / "out")
    assert cli.main(["prepare", "--data", tsv, "--out", out]) == 0
    first = capsys.readouterr().out
    assert "#Users" in first and "#Items" in first and "#Actions" in first
    split = next((tmp_path / "out" / "splits").glob("*.bin"))
    digest = sha(split)
    assert cli.main(["prepare", "--data", tsv, "--out", out]) == 0
    assert "reused" in capsys.readouterr().out
    assert sha(split) == digest
    split.unlink()
    assert cli.main(["prepare", "--data", tsv, "--out", out]) == 0
    assert sha(split) == digest


def test_settings_are_printed(tsv, tmp_path, capsys):
    cli.main(["prepare", "--data", tsv, "--out", str(tmp_path)])
    text = capsys.readouterr().out
    for key in ("lr", "half_window", "keep_prob", "epochs_pretrain", "k", "negatives"):
        assert f"  {key} " in text


def test_missing_data_path_exits_2(tmp_path, capsys):
    assert cli.main(["prepare", "--data", str(tmp_path / "nope.tsv"), "--out", str(tmp_path)]) == 2
    assert "does not exist" in capsys.readouterr().err


@pytest.mark.parametrize(
    "extra",
    [["--window", "4"], ["--bogus"], ["--aggregator", "sum"], ["--config", "/nonexistent.cfg"]],
)
def test_usage_errors_exit_2(extra, tmp_path):
    assert cli.main(["train", "--data", "synthetic", "--out", str(tmp_path)] + extra) == 2


def test_bad_config_line_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    assert cli.main(["prepare", "--data", "synthetic", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "unknown setting" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tiny_config):
    args = cli.build_parser().parse_args(["train", "--config", tiny_config, "--window", "5", "--layers", "3"])
    s = cli.resolve_settings(args)
    assert s["d"] == 8 and s["half_window"] == 2 and s["num_agg_layers"] == 3
    assert s["synthetic.num_users"] == 60 and s["seeds"] == [0]


def test_output_root_from_environment(tmp_path, monkeypatch, tiny_config):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env-out"))
    assert cli.main(["prepare", "--data", "synthetic", "--config", tiny_config]) == 0
    assert list((tmp_path / "env-out" / "splits").glob("synthetic-*.bin"))


def test_train_then_evaluate(tmp_path, tiny_config, capsys):
    out = tmp_path / "out"
    assert cli.main(["train", "--data", "synthetic", "--config", tiny_config, "--out", str(out)] + TINY) == 0
    run = next((out / "runs").iterdir())
    assert {"model.ckpt", "metrics.jsonl", "config.json", "report.json"} <= {p.name for p in run.iterdir()}
    report_path = tmp_path / "eval.json"
    argv = ["evaluate", "--data", "synthetic", "--config", tiny_config, "--out", str(out)]
    assert cli.main(argv + ["--checkpoint", str(run / "model.ckpt"), "--report", str(report_path)]) == 0
    trained = EvalReport.from_json(run / "report.json")
    # the checkpoint stores float32, so scores can move in the last digits
    assert EvalReport.from_json(report_path).metrics == pytest.approx(trained.metrics, abs=0.02)
    assert cli.main(argv + ["--checkpoint", "POP"]) == 0
    assert "HIT@10" in capsys.readouterr().out


def test_evaluate_missing_checkpoint_exits_2(tmp_path, tiny_config):
    argv = ["evaluate", "--data", "synthetic", "--config", tiny_config, "--out", str(tmp_path)]
    assert cli.main(argv) == 2
    assert cli.main(argv + ["--checkpoint", str(tmp_path / "missing.ckpt")]) == 2


def _ablate(out, tiny_config, seeds=("0",)):
    return cli.main(["ablate", "--data", "synthetic", "--config", tiny_config, "--out", str(out), "--seed", *seeds] + TINY)


def test_ablate_smoke_table(tmp_path, tiny_config):
    assert _ablate(tmp_path, tiny_config) == 0
    ablate_dir = next((tmp_path / "ablate").iterdir())
    table = (ablate_dir / "table.txt").read_text().splitlines()
    assert table[0].split() == ["Metric", "POP", "L=0", "MRIF-avg", "MRIF-max", "MRIF-attn"]
    assert [row.split()[0] for row in table[1:]] == ["AUC", "GAUC", "HIT@5", "HIT@10", "NDCG@5", "NDCG@10", "MRR"]


def test_ablate_means_trace_to_reports(tmp_path, tiny_config):
    assert _ablate(tmp_path, tiny_config, seeds=("0", "1")) == 0
    ablate_dir = next((tmp_path / "ablate").iterdir())
    summary = json.loads((ablate_dir / "summary.json").read_text())
    assert summary["complete"] and summary["seeds"] == [0, 1]
    for method, files in summary["reports"].items():
        assert len(files) == 2
        reports = [EvalReport.from_json(ablate_dir / f) for f in files]
        for key, value in summary["means"][method].items():
            assert value == pytest.approx((reports[0].metrics[key] + reports[1].metrics[key]) / 2, abs=1e-15)


def test_ablate_failure_keeps_partial_results(tmp_path, tiny_config, monkeypatch, capsys):
    real = cli.train_model

    def flaky(dataset, mcfg, tcfg, run_dir, quiet=False):
        if mcfg.aggregator == "max":
            raise NonFiniteError("synthetic failure")
        return real(dataset, mcfg, tcfg, run_dir, quiet)

    monkeypatch.setattr(cli, "train_model", flaky)
    assert _ablate(tmp_path, tiny_config) == 1
    assert "synthetic failure" in capsys.readouterr().err
    summary = json.loads(next((tmp_path / "ablate").iterdir()).joinpath("summary.json").read_text())
    assert not summary["complete"]
    assert set(summary["reports"]) == {"POP", "L=0", "MRIF-avg"}


def test_ablate_is_deterministic(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert cli.main(
            ["ablate", "--data", "synthetic", "--config", tiny_config, "--out", str(tmp_path / name), "--methods", "MRIF-attn"]
            + TINY
        ) == 0
    a = next((tmp_path / "a" / "ablate").iterdir())
    b = next((tmp_path / "b" / "ablate").iterdir())
    files = sorted(p.name for p in a.glob("*.json") if p.name != "summary.json")
    assert files and all((a / f).read_bytes() == (b / f).read_bytes() for f in files)
