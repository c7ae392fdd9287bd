import json
import re

import pytest

from skelscan import cli
from skelscan.config import flat_schema

TINY = ["--preset", "desk", "--set", "data.n_train=12", "--set", "data.n_test=6", "--set", "data.T_raw=16",
        "--set", "train.epochs=2"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_no_command_is_usage_error(capsys):
    code, _, err = run(capsys)
    assert code == 1 and err.strip().splitlines()[-1].startswith("ERR 1:")


def test_unknown_flag_and_unknown_key(capsys):
    assert run(capsys, "param-count", "--bogus")[0] == 1
    code, _, err = run(capsys, "param-count", "--set", "model.widht=3")
    assert code == 1 and "unknown config key 'model.widht'" in err
    code, _, err = run(capsys, "param-count", "--set", "model.layers=two")
    assert code == 1 and err.startswith("ERR 1:")


def test_help_lists_every_config_key(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0
    listed = dict(re.findall(r"^  ([a-z]+\.\w+) = (.*)$", out, flags=re.M))
    schema = flat_schema()
    assert set(listed) == set(schema)
    for key, value in schema.items():
        shown = ",".join(map(str, value)) if isinstance(value, tuple) else str(value)
        assert listed[key] == shown, key
    for command in cli.COMMANDS:
        assert command in out


def test_param_count_full(capsys):
    code, out, _ = run(capsys, "param-count", "--preset", "full")
    assert code == 0
    total = int(re.search(r"^total\s+([\d,]+)", out, flags=re.M).group(1).replace(",", ""))
    assert 2_000_000 <= total <= 2_800_000
    for key in ("stem", "spatial_attention", "tdm", "head"):
        assert re.search(rf"^{key}\s+[\d,]+$", out, flags=re.M)
    assert "audit  match" in out


def test_selftest_reports_every_suite(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == 0
    lines = [ln for ln in out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    assert len(lines) >= 8 and all(ln.startswith("PASS") for ln in lines)


def test_bench_scan_csv(capsys, tmp_path):
    code, out, _ = run(capsys, "bench-scan", "--T", "16,32", "--D", "4", "--warmup", "1", "--reps", "3",
                       "--out", str(tmp_path))
    assert code == 0
    rows = out.strip().splitlines()
    assert rows[0] == "T,mean_ms,p50_ms,p95_ms,ratio_vs_prev"
    assert [r.split(",")[0] for r in rows[1:]] == ["16", "32"]
    assert rows[1].split(",")[4] == ""
    assert float(rows[2].split(",")[4]) > 0
    assert list(tmp_path.glob("bench_scan_*.csv"))
    assert run(capsys, "bench-scan", "--T", "a,b")[0] == 1
    assert run(capsys, "bench-scan", "--backend", "gpu")[0] == 1


def test_synth_data_writes_manifest(capsys, tmp_path):
    out = tmp_path / "synth"
    code, _, _ = run(capsys, "synth-data", *TINY, "--out", str(out))
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest) == 18
    assert (out / manifest[0]["path"]).exists()
    assert (out / "config.json").exists() and (out / "run.json").exists()
    # the written files feed straight back in as a manifest dataset
    code, out_text, _ = run(capsys, "train", "--preset", "desk", "--set", "data.source=manifest",
                            "--set", f"data.manifest={out / 'manifest.json'}", "--set", "train.epochs=1",
                            "--out", str(tmp_path / "from_manifest"))
    assert code == 0


def test_train_eval_infer_plot(capsys, tmp_path):
    run_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", *TINY, "--out", str(run_dir))
    assert code == 0
    for name in ("config.json", "run.json", "metrics.jsonl", "report.json", "best/manifest.json"):
        assert (run_dir / name).exists(), name
    info = json.loads((run_dir / "run.json").read_text())
    assert {"git", "version", "seed", "environment"} <= set(info)
    assert json.loads((run_dir / "config.json").read_text())["train"]["epochs"] == 2
    assert "synthetic desk-scale dataset" in out

    code, out, _ = run(capsys, "eval", "--checkpoint", str(run_dir / "best"), "--out", str(tmp_path / "ev"))
    assert code == 0 and "fused" in out

    synth = tmp_path / "synth"
    run(capsys, "synth-data", *TINY, "--out", str(synth))
    sample = next((synth / "skeletons").glob("*.skeleton"))
    code, out, _ = run(capsys, "infer", "--checkpoint", str(run_dir / "best"), "--input", str(sample))
    assert code == 0
    pred = json.loads(out.strip().splitlines()[-1])
    assert len(pred["probabilities"]) == 6 and abs(sum(pred["probabilities"]) - 1) < 1e-5

    plots = tmp_path / "plots"
    code, out, _ = run(capsys, "plot", str(run_dir / "metrics.jsonl"), "--out", str(plots))
    assert code == 0 and (plots / "metrics_curves.png").stat().st_size > 0


def test_plot_sweep_over_frames(capsys, tmp_path):
    sweep = tmp_path / "sweep"
    for T in (8, 16, 32):
        code, _, _ = run(capsys, "train", *TINY, "--set", "train.epochs=1", "--set", f"data.frames={T}",
                         "--out", str(sweep / f"T{T}"))
        assert code == 0
    series = cli.sweep_points(sweep)
    assert list(series) == ["T-scan"] and sorted(p[0] for p in series["T-scan"]) == [8, 16, 32]
    code, out, _ = run(capsys, "plot", "--sweep", str(sweep), "--out", str(tmp_path / "p"))
    assert code == 0 and (tmp_path / "p" / "frames_vs_accuracy.png").exists()


def test_plot_errors(capsys, tmp_path):
    assert run(capsys, "plot", str(tmp_path / "missing.jsonl"))[0] == 2
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert run(capsys, "plot", str(empty), "--out", str(tmp_path / "p"))[0] == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_data_and_numeric_exit_codes(capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "nope"))
    assert code == 2 and err.startswith("ERR 2:")
    code, _, err = run(capsys, "train", "--preset", "desk", "--set", "data.source=manifest",
                       "--set", f"data.manifest={tmp_path / 'none.json'}", "--out", str(tmp_path / "r"))
    assert code == 2
    code, _, err = run(capsys, "train", *TINY, "--set", "train.lr=1e30", "--set", "train.grad_clip=0",
                       "--out", str(tmp_path / "blowup"))
    assert code == 3 and err.startswith("ERR 3:")
    assert (tmp_path / "blowup" / "last_good" / "manifest.json").exists()


def test_config_file_and_indivisible_frames(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"model": {"layers": 3}}))
    code, out, _ = run(capsys, "param-count", "--config", str(cfg), "--preset", "desk")
    assert code == 0
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(capsys, "param-count", "--config", str(bad))[0] == 1
    code, _, err = run(capsys, "train", *TINY, "--set", "data.frames=15", "--out", str(tmp_path / "r"))
    assert code == 1 and "divisible" in err


def test_version(capsys):
    code, out, _ = run(capsys, "--version")
    assert code == 0 and out.startswith("skelscan ")
