import json
import time

import pytest

from crossfilter.cli import main
from crossfilter.experiment import ExperimentConfig

TINY = ["--classes", "3", "--n-curated", "2", "--n-noisy", "4", "--n-test", "2", "--max-seconds", "2"]
FAST = ["--epochs", "2", "--widths", "4,8", "--batch-size", "4"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "d")] + TINY) == 0
    return root


def manifest(root):
    return str(root / "d" / "manifest.csv")


def test_synth_bad_ratio(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--noise-ratio", "1.5"]) == 1
    assert "noise_ratio" in capsys.readouterr().err


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--out", str(tmp_path / name)] + TINY) == 0
    a = sorted((tmp_path / "a" / "audio").iterdir())
    b = sorted((tmp_path / "b" / "audio").iterdir())
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_usage_errors(data_dir):
    assert main(["train", "--method", "cce"]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--manifest", manifest(data_dir), "--method", "nope"])
    assert exc.value.code == 1
    assert main(["train", "--manifest", manifest(data_dir), "--method", "cce", "--epsilon", "0.2"]) == 1
    assert main(["train", "--manifest", str(data_dir / "missing.csv")]) == 1


def test_featurize_idempotent(data_dir, capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("CROSSFILTER_CACHE", str(tmp_path / "cache"))
    assert main(["featurize", "--manifest", manifest(data_dir)]) == 0
    assert capsys.readouterr().out.startswith("48 computed")
    assert len(list((tmp_path / "cache").rglob("*.cftr"))) == 2 * 24
    assert main(["featurize", "--manifest", manifest(data_dir)]) == 0
    assert capsys.readouterr().out.startswith("0 computed, 48 up to date")


def test_featurize_corrupt_wav(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d")] + TINY) == 0
    (tmp_path / "d" / "audio" / "n00001.wav").write_bytes(b"RIFFjunk")
    assert main(["featurize", "--manifest", str(tmp_path / "d" / "manifest.csv")]) == 2
    assert "n00001" in capsys.readouterr().err


@pytest.mark.parametrize("method", ["crossfilter", "cce"])
def test_train_eval_report(data_dir, method, capsys):
    run = data_dir / f"run_{method}"
    t0 = time.time()
    assert main(["train", "--manifest", manifest(data_dir), "--method", method, "--out", str(run)] + FAST) == 0
    assert time.time() - t0 < 60
    cfg = ExperimentConfig.read(run / "config.json")
    assert cfg.method == method and cfg.train.epochs == 2 and cfg.train.widths == (4, 8)
    rows = [json.loads(line) for line in (run / "history.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    if method == "crossfilter":
        assert {"pseudo_count_1", "pseudo_count_2", "k"} <= set(rows[0])
    assert main(["eval", "--run", str(run)]) == 0
    out = json.loads((run / "eval" / "metrics.json").read_text())
    assert set(out["rows"]) == {"M1", "M2", "M1+M2"}
    assert (run / "eval" / "per_class_M1plusM2_accuracy.csv").exists()
    assert (run / "eval" / "loss_vs_epoch.png").exists()
    assert main(["report", str(run), "--out", str(data_dir / f"report_{method}.csv")]) == 0
    assert (data_dir / f"report_{method}.json").exists()


def test_eval_reproducible(data_dir):
    run = data_dir / "run_repro"
    assert main(["train", "--manifest", manifest(data_dir), "--method", "mtl", "--out", str(run)] + FAST) == 0
    assert main(["eval", "--run", str(run), "--out", str(run / "e1"), "--no-plots"]) == 0
    assert main(["eval", "--run", str(run), "--out", str(run / "e2"), "--no-plots"]) == 0
    assert (run / "e1" / "metrics.json").read_bytes() == (run / "e2" / "metrics.json").read_bytes()
    # retraining from the written config alone reproduces the run
    again = data_dir / "run_repro2"
    assert main(["train", "--config", str(run / "config.json"), "--out", str(again)]) == 0
    assert main(["eval", "--run", str(again), "--out", str(again / "e"), "--no-plots"]) == 0
    a = json.loads((run / "e1" / "metrics.json").read_text())["rows"]
    b = json.loads((again / "e" / "metrics.json").read_text())["rows"]
    assert a == b


def test_resume_matches(data_dir):
    full, part = data_dir / "full", data_dir / "part"
    args = ["train", "--manifest", manifest(data_dir), "--method", "crossfilter", "--epochs", "3",
            "--widths", "4,8", "--batch-size", "4"]
    assert main(args + ["--out", str(full)]) == 0
    assert main(args + ["--out", str(part), "--stop-after", "1"]) == 0
    assert main(args + ["--out", str(part), "--resume"]) == 0
    for run in (full, part):
        assert main(["eval", "--run", str(run), "--no-plots"]) == 0
    a = json.loads((full / "eval" / "metrics.json").read_text())["rows"]
    b = json.loads((part / "eval" / "metrics.json").read_text())["rows"]
    for model in a:
        for metric in a[model]:
            assert abs(a[model][metric] - b[model][metric]) <= 1e-6
    assert (full / "history.jsonl").read_text() == (part / "history.jsonl").read_text()


def test_eval_empty_test_and_mismatch(data_dir, tmp_path):
    run = data_dir / "run_cce"
    if not (run / "models.pt").exists():
        pytest.skip("depends on test_train_eval_report")
    lines = (data_dir / "d" / "manifest.csv").read_text().splitlines()
    no_test = tmp_path / "m.csv"
    audio = data_dir / "d" / "audio"
    body = [l.replace("audio/", f"{audio}/") for l in lines[1:] if not l.endswith(",test")]
    no_test.write_text("\n".join([lines[0]] + body) + "\n")
    assert main(["eval", "--run", str(run), "--manifest", str(no_test)]) == 2
    two = tmp_path / "two.csv"
    keep = [l.replace("audio/", f"{audio}/") for l in lines[1:] if ",burst," in l or ",tone," in l]
    two.write_text("\n".join([lines[0]] + keep) + "\n")
    assert main(["eval", "--run", str(run), "--manifest", str(two)]) == 2
