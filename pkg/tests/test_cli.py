import csv
import json

import pytest

from imuloc import cli
from imuloc import harness as H

SMALL = ["--n-recordings", "10", "--length", "200", "--window", "60", "--step", "30",
         "--hidden-dim", "4", "--conv-channels", "2", "--epochs", "2", "--baseline-epochs", "1"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert cli.main(["simulate", "--seed", "5", "--out", str(out)] + SMALL) == 0
    return out


def test_simulate_requires_seed(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["simulate", "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert "--seed" in capsys.readouterr().err


def test_train_requires_seed(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["train", "--corpus", str(tmp_path), "--out", str(tmp_path)])


def test_simulate_manifest(corpus):
    with open(corpus / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == H.MANIFEST_COLUMNS
    assert len(rows) == 10
    assert [int(r["seed"]) for r in rows] == list(range(5, 15))
    for r in rows:
        assert (corpus / f"{r['recording_id']}_tracks.csv").exists()
        assert (corpus / f"{r['recording_id']}_imu.csv").exists()


def test_train_eval_report(corpus, tmp_path, capsys):
    model = tmp_path / "model"
    assert cli.main(["train", "--seed", "1", "--corpus", str(corpus), "--out", str(model)]
                    + SMALL) == 0
    for name in ("config.txt", "model.ckpt", "loss.csv", "failures.txt", "loss.png"):
        assert (model / name).exists()
    ev = tmp_path / "eval"
    assert cli.main(["eval", "--corpus", str(corpus), "--model", str(model), "--out", str(ev)]) == 0
    out = capsys.readouterr().out
    assert H.OURS_LABEL in out and H.RANDOM_LABEL in out
    table = H.load_table(ev / "results.json")
    assert table.methods == [H.RANDOM_LABEL, H.OURS_LABEL]
    assert (ev / "results.png").exists()

    assert cli.main(["report", str(ev / "results.json"), "--format", "csv"]) == 0
    assert capsys.readouterr().out == (ev / "results.csv").read_text()
    txt = tmp_path / "r.txt"
    assert cli.main(["report", str(ev / "results.json"), "--out", str(txt),
                     "--figure", str(tmp_path / "r.png")]) == 0
    assert txt.read_text() == (ev / "results.txt").read_text()
    assert (tmp_path / "r.png").stat().st_size > 0


def test_baseline_command(corpus, tmp_path):
    assert cli.main(["baseline", "--corpus", str(corpus), "--out", str(tmp_path), "--no-figure"]
                    + SMALL) == 0
    data = json.loads((tmp_path / "baselines.json").read_text())
    assert len({r["method"] for r in data["rows"]}) == 6


def test_extract_lists_samples(corpus, tmp_path):
    with open(corpus / "manifest.csv", newline="") as fh:
        first = next(csv.DictReader(fh))
    rid = first["recording_id"]
    out = tmp_path / "windows.csv"
    code = cli.main(["extract", "--tracks", str(corpus / f"{rid}_tracks.csv"),
                     "--imu", str(corpus / f"{rid}_imu.csv"),
                     "--video-start-ns", first["video_start_ns"], "--out", str(out),
                     "--window", "60", "--step", "30"])
    assert code == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and {r["kept"] for r in rows} <= {"0", "1"}
    assert len({r["start_frame"] for r in rows}) == (200 - 60) // 30 + 1


def test_extract_missing_file_is_error(tmp_path, capsys):
    code = cli.main(["extract", "--tracks", str(tmp_path / "none.csv"),
                     "--imu", str(tmp_path / "none2.csv"), "--video-start-ns", "0"])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_check_mode_fails_on_out_of_range_fraction(tmp_path, capsys):
    # an absurd threshold filters nearly every window
    code = cli.main(["simulate", "--seed", "0", "--out", str(tmp_path), "--check",
                     "--motion-threshold", "100"] + SMALL)
    assert code == 1
    assert "[FAIL] filtered fraction" in capsys.readouterr().out


def test_acceptance_checks_flags_losing_method():
    t = H.ResultTable()
    for n in H.EVAL_N:
        t.add(H.RANDOM_LABEL, n, 10 / n, 10)
        t.add("1) Velocity Magnitude", n, 9, 10)
        t.add(H.OURS_LABEL, n, 8, 10)
    checks = cli.acceptance_checks(H.ExperimentResult(t))
    status = {name: ok for name, ok, _ in checks}
    assert status["N=2 margin over chance"] and status["N=5 margin over chance"]
    assert not status["beats every baseline (mean over N)"]
    assert cli._check(checks) == 1


def test_config_file_flags_override(tmp_path):
    cfg_path = tmp_path / "c.txt"
    cfg_path.write_text("window = 100\nlr = 0.01\n")
    args = cli.build_parser().parse_args(["train", "--seed", "3", "--corpus", "x", "--out", "y",
                                          "--config", str(cfg_path), "--lr", "0.5"])
    cfg = cli._config(args, seed=args.seed)
    assert (cfg.window, cfg.lr, cfg.seed) == (100, 0.5, 3)
