"""Command-line pipeline: synth, train, eval, sweep, gradcheck, report.

Every command writes ``run.json`` into its output directory with the fully
resolved arguments. Passing that file back via ``--config`` reproduces the
run; explicit flags override values from the file.

Exit codes: 0 success, 1 validation error (bad flag or value), 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import detector as det
from . import evaluation as ev
from . import synth
from .gradsuite import main_table

log = logging.getLogger("athresh")

ABLATION_ORDER = ("baseline", "dth", "dth_ith", "dth_ith_ge")
ABLATION_LABELS = {
    "baseline": "baseline (fixed 0.5)",
    "dth": "DTH",
    "dth_ith": "DTH + ITH",
    "dth_ith_ge": "DTH + ITH + GE",
}

# defaults per command; a flag left unset falls back to the config file, then here
DEFAULTS = {
    "synth": {"n": 100, "seed": 0, "preset": "hetero", "canvas": [128, 128], "gamma": None, "threads": 1},
    "train": {"corpus": None, "seed": 0, "epochs": 10, "lr": 1e-3, "alpha": 0.5, "beta": 0.5, "k": 50.0,
              "heads": 4, "ge_repeats": 2, "variant": "dth_ith_ge", "batch_size": 8, "instance_weight": 0.0},
    "eval": {"corpus": None, "ckpt": None, "split": "val", "min_area": 20, "iou": 0.5, "threads": 1},
    "sweep": {"corpus": None, "ckpt": None, "split": "val", "min_area": 20, "iou": 0.5, "grid_step": 0.1,
              "fine_step": 0.01},
    "gradcheck": {"trials": 100, "seed": 0},
    "report": {"runs": []},
}
REQUIRED = {"train": ("corpus",), "eval": ("corpus", "ckpt"), "sweep": ("corpus", "ckpt")}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    parser = _Parser(prog="athresh", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(p):
        p.add_argument("--out", default=S, help="output directory")
        p.add_argument("--config", default=S, help="JSON config or a previous run.json")
        p.add_argument("--threads", type=_positive_int, default=S)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--n", type=_positive_int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--preset", choices=sorted(synth.PRESETS), default=S)
    p.add_argument("--canvas", type=int, nargs=2, metavar=("H", "W"), default=S)
    p.add_argument("--gamma", type=float, default=S, help="pin contrast gamma to one value")

    p = sub.add_parser("train", help="train the detector on a corpus")
    common(p)
    p.add_argument("--corpus", default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--alpha", type=float, default=S)
    p.add_argument("--beta", type=float, default=S)
    p.add_argument("--k", type=float, default=S)
    p.add_argument("--heads", type=_positive_int, default=S)
    p.add_argument("--ge-repeats", type=int, default=S)
    p.add_argument("--variant", choices=det.VARIANTS, default=S)
    p.add_argument("--batch-size", type=_positive_int, default=S)
    p.add_argument("--instance-weight", type=float, default=S)

    for name, extra in (("eval", False), ("sweep", True)):
        p = sub.add_parser(name, help="score a checkpoint" if not extra else "fixed-threshold sweep vs ITH")
        common(p)
        p.add_argument("--corpus", default=S)
        p.add_argument("--ckpt", default=S)
        p.add_argument("--split", choices=("train", "val", "test", "all"), default=S)
        p.add_argument("--min-area", type=int, default=S)
        p.add_argument("--iou", type=float, default=S)
        if extra:
            p.add_argument("--grid-step", type=float, default=S)
            p.add_argument("--fine-step", type=float, default=S)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--trials", type=_positive_int, default=S)
    p.add_argument("--seed", type=int, default=S)

    p = sub.add_parser("report", help="ablation table from eval run directories")
    common(p)
    p.add_argument("runs", nargs="*", default=S, help="eval output directories")
    return parser


def resolve(argv) -> dict:
    """Parse argv and merge with --config and defaults (flags win)."""
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    cfg_path = ns.pop("config", None)
    resolved = dict(DEFAULTS[command])
    resolved["out"] = None
    if cfg_path is not None:
        try:
            data = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from exc
        if "command" in data and data["command"] != command:
            raise UsageError(f"config {cfg_path} is for command {data['command']!r}, not {command!r}")
        data = data.get("args", data)
        unknown = set(data) - set(resolved) - {"threads"}
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        resolved.update(data)
    resolved.update(ns)
    resolved.setdefault("threads", 1)
    for key in REQUIRED.get(command, ()):
        if resolved.get(key) is None:
            raise UsageError(f"{command} requires --{key.replace('_', '-')}")
    if resolved["out"] is None:
        resolved["out"] = f"{command}_out"
    return {"command": command, "args": resolved}


def _write_run(out: Path, run: dict, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = dict(run)
    if extra:
        record.update(extra)
    (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands: each returns (validate, execute) so validation errors map to exit 1


def _synth(a):
    dist = synth.preset(a["preset"], canvas=tuple(a["canvas"]), gamma=a["gamma"])
    synth.sample_spec(a["seed"], dist).validate()

    def run(out):
        corpus = synth.generate_corpus(a["n"], a["seed"], dist, out_dir=out, threads=a["threads"])
        sizes = synth.split_sizes(len(corpus.scenes))
        print(f"wrote {len(corpus.scenes)} scenes to {out} (train/val/test {sizes[0]}/{sizes[1]}/{sizes[2]})")
        return {"distribution": dist.to_json()}

    return run


def _train(a):
    corpus = synth.read_corpus(a["corpus"])
    cfg = det.DetectorConfig(
        canvas=tuple(corpus.canvas), heads=a["heads"], ge_repeats=a["ge_repeats"], variant=a["variant"],
        alpha=a["alpha"], beta=a["beta"], k=a["k"], lr=a["lr"], epochs=a["epochs"],
        batch_size=a["batch_size"], seed=a["seed"], instance_weight=a["instance_weight"])

    def run(out):
        result = det.train(corpus, cfg, on_epoch=lambda s, r: print(
            f"epoch {r['epoch']:3d}  train {r['train_loss']:.5f}  val {r['val_loss']:.5f}  t_D {r['t_D']:.4f}"))
        det.save_checkpoint(out / "final.ckpt", result.final)
        det.save_checkpoint(out / "best.ckpt", result.best)
        print(f"final t_D {result.final.dataset_threshold:.4f}; checkpoints in {out}")
        return {"detector_config": cfg.to_json()}

    return run


def _load_eval_inputs(a):
    corpus = synth.read_corpus(a["corpus"])
    state = det.load_checkpoint(a["ckpt"])
    if tuple(corpus.canvas) != tuple(state.config.canvas):
        raise det.ConfigError(f"corpus canvas {corpus.canvas} does not match checkpoint {state.config.canvas}")
    if not 0.0 < a["iou"] <= 1.0:
        raise ValueError(f"--iou must be in (0, 1], got {a['iou']}")
    if a["min_area"] < 1:
        raise ValueError(f"--min-area must be >= 1, got {a['min_area']}")
    scenes = corpus.split(a["split"])
    if not scenes:
        raise ValueError(f"split {a['split']!r} is empty")
    return state, scenes


def _eval(a):
    state, scenes = _load_eval_inputs(a)

    def run(out):
        maps, t_D, ith = det.predict(state, scenes)
        gts = [s.gt_instances for s in scenes]
        report = ev.evaluate_maps(maps, gts, ith, a["min_area"], a["iou"])
        ev.write_report(out, report)
        print(f"P {report.precision:.4f}  R {report.recall:.4f}  F {report.fmeasure:.4f}  "
              f"({report.tp} TP, {report.n_det} dets, {report.n_gt} gts)")
        return {"variant": state.config.variant, "t_D": t_D, "ith_mean": float(np.mean(ith)),
                "summary": report.summary()}

    return run


def _sweep(a):
    state, scenes = _load_eval_inputs(a)
    for key in ("grid_step", "fine_step"):
        if not 0.0 < a[key] < 1.0:
            raise ValueError(f"--{key.replace('_', '-')} must be in (0, 1), got {a[key]}")

    def run(out):
        maps, t_D, ith = det.predict(state, scenes)
        gts = [s.gt_instances for s in scenes]
        curve = ev.sweep(maps, gts, ith, a["grid_step"], a["fine_step"], a["min_area"], a["iou"])
        ev.write_sweep(out, curve)
        for t, f in zip(curve.thresholds, curve.fmeasures):
            print(f"t={t:.2f}  F={f:.4f}")
        print(f"ITH mean {curve.ith_point[0]:.4f}  F={curve.ith_point[1]:.4f}; "
              f"oracle t={curve.oracle_threshold:.2f} F={curve.oracle_f:.4f}; t_D {t_D:.4f}")
        return {"variant": state.config.variant, "t_D": t_D}

    return run


def _gradcheck(a):
    def run(out):
        ok, table = main_table(a["trials"], a["seed"])
        print(table)
        (out / "gradcheck.txt").write_text(table + "\n")
        if not ok:
            raise GradcheckFailed("one or more operations exceeded tolerance")
        return {}

    return run


class GradcheckFailed(RuntimeError):
    pass


def ablation_rows(run_dirs) -> list[dict]:
    """One row per variant in fixed order; later runs of the same variant replace earlier ones."""
    by_variant = {}
    for d in run_dirs:
        path = Path(d) / "run.json"
        try:
            meta = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"missing or unreadable run metadata {path}: {exc}") from exc
        if meta.get("command") != "eval" or "variant" not in meta or "summary" not in meta:
            raise ValueError(f"{path} is not a completed eval run")
        by_variant[meta["variant"]] = meta["summary"]
    return [{"variant": v, **by_variant[v]} for v in ABLATION_ORDER if v in by_variant]


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "precision", "recall", "fmeasure"])
    for r in rows:
        w.writerow([ABLATION_LABELS[r["variant"]], repr(r["precision"]), repr(r["recall"]), repr(r["fmeasure"])])
    return buf.getvalue()


def ablation_markdown(rows) -> str:
    lines = ["| Method | P (%) | R (%) | F (%) |", "|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {ABLATION_LABELS[r['variant']]} | {100 * r['precision']:.2f} | "
                     f"{100 * r['recall']:.2f} | {100 * r['fmeasure']:.2f} |")
    return "\n".join(lines) + "\n"


def _report(a):
    if not a["runs"]:
        raise ValueError("report needs at least one eval run directory")
    rows = ablation_rows(a["runs"])

    def run(out):
        (out / "ablation.csv").write_text(ablation_csv(rows))
        md = ablation_markdown(rows)
        (out / "ablation.md").write_text(md)
        print(md, end="")
        return {}

    return run


COMMANDS = {"synth": _synth, "train": _train, "eval": _eval, "sweep": _sweep,
            "gradcheck": _gradcheck, "report": _report}


def main(argv=None) -> int:
    level = os.environ.get("ATHRESH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        run = resolve(sys.argv[1:] if argv is None else argv)
        execute = COMMANDS[run["command"]](run["args"])
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"athresh: invalid input: {exc}", file=sys.stderr)
        return 1
    out = Path(run["args"]["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        extra = execute(out)
        _write_run(out, run, extra)
    except GradcheckFailed as exc:
        print(f"athresh: {exc}", file=sys.stderr)
        _write_run(out, run, {"failed": True})
        return 2
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"athresh: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
