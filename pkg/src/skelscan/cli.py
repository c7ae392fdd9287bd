"""Command-line entry point: ``skelscan <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
3 numeric failure.  Failures print one line ``ERR <code>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import copy
import json
import platform
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .config import RunConfig, apply_overrides, flat_schema, from_dict, load_config
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError

COMMANDS = ("train", "train-cpkd", "eval", "infer", "synth-data", "bench-scan", "param-count", "selftest", "plot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def config_help(cfg: RunConfig | None = None) -> str:
    lines = ["config keys (override with --set key=value; defaults shown):"]
    for key, value in flat_schema(cfg or RunConfig()).items():
        if isinstance(value, tuple):
            value = ",".join(map(str, value))
        lines.append(f"  {key} = {value}")
    return "\n".join(lines)


def _add_config_args(p):
    p.add_argument("--config", help="JSON config file (sections model/train/data/kd)")
    p.add_argument("--preset", choices=("full", "desk"), help="start from a named preset")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, repeatable")
    p.add_argument("--out", default="runs/latest", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="skelscan", description="Skeleton action recognition with bidirectional selective scans.",
                     epilog=config_help(), formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"skelscan {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    for name, text in (("train", "train a model"), ("train-cpkd", "train a covariance teacher, then distil a GAP student")):
        p = sub.add_parser(name, help=text, epilog=config_help(), formatter_class=fmt)
        _add_config_args(p)

    p = sub.add_parser("eval", help="evaluate checkpoints (one per stream) with score fusion",
                       epilog=config_help(), formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("--checkpoint", action="append", required=True, help="checkpoint directory, repeatable")

    p = sub.add_parser("infer", help="classify one NTU .skeleton file or TDMT array")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("synth-data", help="write a synthetic dataset as .skeleton files plus a manifest",
                       epilog=config_help(), formatter_class=fmt)
    _add_config_args(p)

    p = sub.add_parser("bench-scan", help="time the scan kernel across sequence lengths")
    p.add_argument("--T", default="256,512,1024", help="comma-separated sequence lengths")
    p.add_argument("--D", type=int, default=64)
    p.add_argument("--S", type=int, default=16)
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--reps", type=int, default=30)
    p.add_argument("--backend", default="active", help="compiled, python, active or both")
    p.add_argument("--direction", choices=("forward", "backward"), default="forward")
    p.add_argument("--out", default=None)

    p = sub.add_parser("param-count", help="print per-module and total parameter counts",
                       epilog=config_help(), formatter_class=fmt)
    _add_config_args(p)
    p.set_defaults(out=None)

    sub.add_parser("selftest", help="run the oracle suites of every module")

    p = sub.add_parser("plot", help="render loss/accuracy curves from metrics logs")
    p.add_argument("metrics", nargs="*", help="JSON-lines metrics logs")
    p.add_argument("--sweep", help="directory of runs for a frames-vs-accuracy plot")
    p.add_argument("--out", default="plots")
    return parser


# -- run bookkeeping -------------------------------------------------------------------


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def environment_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "scan_backend": kernels.active(),
        "backends": kernels.available(),
    }


def write_run_header(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    info = {"command": command, "version": __version__, "git": git_describe(), "seed": cfg.train.seed,
            "model_seed": cfg.model.seed, "data_seed": cfg.data.seed, "environment": environment_fingerprint()}
    (out / "run.json").write_text(json.dumps(info, indent=2))


def _resolve(args) -> RunConfig:
    return load_config(args.config, args.preset, args.overrides)


def load_sequences(cfg: RunConfig):
    """(train, test) sequence lists for the configured data source."""
    from .attention import SkeletonTopology
    from .data import load_manifest_dataset, split_dataset, synthetic_split

    dc = cfg.data
    topology = SkeletonTopology.load(cfg.model.topology)
    if dc.source == "synthetic":
        if cfg.model.n_classes != dc.n_classes:
            raise ConfigError(f"model.n_classes ({cfg.model.n_classes}) != data.n_classes ({dc.n_classes})")
        return synthetic_split(dc.n_classes, dc.n_train, dc.n_test, dc.T_raw, topology, dc.seed, dc.noise)
    if dc.source == "manifest":
        if not dc.manifest:
            raise ConfigError("data.source=manifest needs data.manifest")
        seqs = load_manifest_dataset(dc.manifest, dc.cache_dir or None)
        return split_dataset(seqs, dc.test_fraction, dc.seed)
    raise ConfigError(f"unknown data.source {dc.source!r}")


# -- commands --------------------------------------------------------------------------


def cmd_train(args) -> int:
    from .model import build_model, evaluate, train

    cfg = _resolve(args).validate()
    out = Path(args.out)
    write_run_header(out, cfg, "train")
    tr, te = load_sequences(cfg)
    model = build_model(cfg.model)
    res = train(model, tr, te, cfg, out_dir=out, log_path=out / "metrics.jsonl",
                callback=lambda r: print(json.dumps(r), flush=True))
    report = evaluate({cfg.model.stream: model}, te, cfg)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    print(report.render())
    return 0


def cmd_train_cpkd(args) -> int:
    from .model import evaluate, train_cpkd

    cfg = _resolve(args).validate()
    out = Path(args.out)
    write_run_header(out, cfg, "train-cpkd")
    teacher_cfg, student_cfg = copy.deepcopy(cfg), copy.deepcopy(cfg)
    teacher_cfg.model.head_kind, student_cfg.model.head_kind = "cov_pool", "gap"
    tr, te = load_sequences(cfg)
    res = train_cpkd(teacher_cfg, student_cfg, tr, te, out_dir=out)
    report = evaluate({cfg.model.stream: res.student}, te, cfg)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    print(f"teacher params {res.teacher.num_parameters()}  student params {res.student.num_parameters()}")
    print(report.render())
    return 0


def cmd_eval(args) -> int:
    from .model import evaluate, load_checkpoint

    cfg = _resolve(args)
    models = {}
    for path in args.checkpoint:
        m = load_checkpoint(path)
        blob = json.loads((Path(path) / "config.json").read_text())
        if "run" in blob and not args.config and not args.preset:
            cfg = apply_overrides(from_dict(blob["run"], RunConfig()), args.overrides)
        models[m.cfg.stream] = m
    out = Path(args.out)
    write_run_header(out, cfg, "eval")
    _, te = load_sequences(cfg)
    report = evaluate(models, te, cfg)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    print(report.render())
    return 0


def cmd_infer(args) -> int:
    from . import tensor_io
    from .data import SkeletonSequence, parse_ntu_skeleton, prepare_sample
    from .model import load_checkpoint
    from .tensor import Tensor, no_grad, softmax

    model = load_checkpoint(args.checkpoint)
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(f"input not found: {src}")
    if src.suffix == ".tdmt":
        x = tensor_io.load(src).astype(np.float64)
        if x.ndim == 3:
            x = x[:, None]
        seq = SkeletonSequence(x)
    else:
        seq = parse_ntu_skeleton(src.read_text())
    blob = json.loads((Path(args.checkpoint) / "config.json").read_text())
    run = blob.get("run", {})
    frames = run.get("data", {}).get("frames", 64)
    centre = run.get("data", {}).get("center_joint", -1)
    if centre < 0:
        centre = 1 if (run.get("data", {}).get("source", "manifest") != "synthetic"
                       and model.cfg.topology == "ntu25") else 0
    x = prepare_sample(seq, frames, "eval_full", model.cfg.stream, model.topology, centre)
    model.eval()
    with no_grad():
        probs = softmax(model(Tensor(x[None])), axis=-1).data[0]
    result = {"prediction": int(probs.argmax()), "probabilities": [float(p) for p in probs]}
    print(json.dumps(result))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "prediction.json").write_text(json.dumps(result))
    return 0


def cmd_synth_data(args) -> int:
    from .data import format_ntu_skeleton

    cfg = _resolve(args)
    out = Path(args.out)
    write_run_header(out, cfg, "synth-data")
    tr, te = load_sequences(cfg)
    (out / "skeletons").mkdir(exist_ok=True)
    manifest = []
    for split, seqs in (("train", tr), ("test", te)):
        for i, s in enumerate(seqs):
            rel = f"skeletons/{split}_{i:04d}_A{s.label:03d}.skeleton"
            (out / rel).write_text(format_ntu_skeleton(s.frames))
            manifest.append({"path": rel, "label": int(s.label), "subject": 0, "camera": 0, "setup": 0,
                             "split": split})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    print(f"wrote {len(manifest)} sequences to {out}")
    return 0


def cmd_bench_scan(args) -> int:
    from .bench import bench_scan, rows_to_csv

    try:
        T_values = [int(v) for v in args.T.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--T must be comma-separated integers, got {args.T!r}") from None
    if not T_values or min(T_values) < 1:
        raise ConfigError("--T needs positive lengths")
    if args.backend == "both":
        names = kernels.available()
    elif args.backend == "active":
        names = [kernels.active()]
    else:
        if args.backend not in kernels.available():
            raise ConfigError(f"backend {args.backend!r} unavailable; have {kernels.available()}")
        names = [args.backend]
    texts = {}
    for name in names:
        rows = bench_scan(T_values, args.D, args.S, args.N, args.warmup, args.reps, name, args.direction)
        texts[name] = rows_to_csv(rows)
        if len(names) > 1:
            print(f"# backend={name}")
        print(texts[name], end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in texts.items():
            (out / f"bench_scan_{name}.csv").write_text(text)
    return 0


def cmd_param_count(args) -> int:
    from .model import build_model, param_count_formula, runtime_param_breakdown

    cfg = load_config(args.config, args.preset or "full", args.overrides)
    cfg.model.validate()
    model = build_model(cfg.model)
    runtime = runtime_param_breakdown(model)
    formula = param_count_formula(cfg.model, model.topology.n_joints)
    for key in ("stem", "spatial_attention", "tdm", "head"):
        print(f"{key:<18} {runtime[key]:>10,d}")
    print(f"{'total':<18} {runtime['total']:>10,d}")
    print(f"closed-form audit  {'match' if formula == runtime else 'MISMATCH'}")
    if args.out:
        write_run_header(Path(args.out), cfg, "param-count")
        (Path(args.out) / "param_count.json").write_text(json.dumps({"runtime": runtime, "formula": formula}))
    return 0 if formula == runtime else 3


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all() else 3


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"metrics log not found: {path}")
    recs = [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]
    if not recs:
        raise UsageError(f"metrics log {path} is empty")
    return recs


def plot_metrics(logs, out_dir, sweep_dir=None) -> list[Path]:
    """Loss and accuracy curves per log; optional frames-vs-accuracy sweep plot."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for log in logs:
        recs = read_metrics(log)
        ep = [r["epoch"] for r in recs]
        stem = Path(log).stem
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.5))
        a1.plot(ep, [r["train_loss"] for r in recs], marker="o")
        a1.set_xlabel("epoch")
        a1.set_ylabel("train loss")
        a2.plot(ep, [r["train_acc"] for r in recs], marker="o", label="train")
        a2.plot(ep, [r["eval_acc"] for r in recs], marker="s", label="eval")
        a2.set_xlabel("epoch")
        a2.set_ylabel("accuracy")
        a2.legend()
        fig.tight_layout()
        path = out / f"{stem}_curves.png"
        fig.savefig(path)
        plt.close(fig)
        files.append(path)
    if sweep_dir:
        series = sweep_points(sweep_dir)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, pts in sorted(series.items()):
            pts = sorted(pts)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
        ax.set_xlabel("frames")
        ax.set_ylabel("best eval accuracy")
        ax.legend()
        fig.tight_layout()
        path = out / "frames_vs_accuracy.png"
        fig.savefig(path)
        plt.close(fig)
        files.append(path)
    if not files:
        raise UsageError("nothing to plot: give metrics logs or --sweep")
    return files


def sweep_points(sweep_dir) -> dict[str, list[tuple[int, float]]]:
    """``{series: [(frames, best eval_acc), ...]}`` from run sub-directories; series is the scan layout."""
    root = Path(sweep_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"sweep directory not found: {root}")
    series: dict[str, list] = {}
    for run in sorted(p for p in root.iterdir() if p.is_dir()):
        cfg_path, log = run / "config.json", run / "metrics.jsonl"
        if not (cfg_path.exists() and log.exists()):
            continue
        cfg = json.loads(cfg_path.read_text())
        recs = read_metrics(log)
        series.setdefault(f"{cfg['model']['scan']}-scan", []).append(
            (int(cfg["data"]["frames"]), max(r["eval_acc"] for r in recs)))
    if not series:
        raise UsageError(f"no runs with config.json and metrics.jsonl under {root}")
    return series


def cmd_plot(args) -> int:
    for f in plot_metrics(args.metrics, args.out, args.sweep):
        print(f)
    return 0


HANDLERS = {
    "train": cmd_train,
    "train-cpkd": cmd_train_cpkd,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "synth-data": cmd_synth_data,
    "bench-scan": cmd_bench_scan,
    "param-count": cmd_param_count,
    "selftest": cmd_selftest,
    "plot": cmd_plot,
}


def _fail(code: int, message: str) -> int:
    print(f"ERR {code}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return _fail(1, "no command given")
        return HANDLERS[args.command](args)
    except (UsageError, ConfigError) as exc:
        return _fail(1, str(exc))
    except NumericError as exc:
        return _fail(3, str(exc))
    except (DataError, ShapeError, ContractError, OSError) as exc:
        return _fail(2, str(exc))
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
