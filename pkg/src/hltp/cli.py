"""Command-line entry point.

    hltp synth --scenes 64 --seed 7 --out cache/
    hltp train-teacher --config run.toml --train.epochs=20
    hltp train-student --teacher runs/train-teacher/final
    hltp evaluate --checkpoint runs/train-student/final --data cache/
    hltp ablate --suite components
    hltp plot-density --checkpoint ... --data cache/ --scene-id 3 --out fig.png
    hltp params

Exit codes: 0 success, 1 runtime failure, 2 bad configuration or arguments,
3 missing teacher checkpoint.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import SUITES, AblationConfig, run_ablation
from .checkpoint import load_checkpoint
from .config import ConfigError, build, load_config
from .data import SyntheticConfig, generate_synthetic_scenes, load_scenes, save_scenes
from .losses import KdmState
from .storage import write_manifest
from .student import StudentConfig, StudentModel
from .teacher import TeacherModel, count_parameters
from .training import evaluate, featurize, train_student, train_teacher

logger = logging.getLogger("hltp")

OUTPUT_ROOT_ENV = "HLTP_OUTPUT_ROOT"
EXIT_RUNTIME, EXIT_CONFIG, EXIT_NO_TEACHER = 1, 2, 3


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str = __version__
    started_at: str = ""
    outputs: dict = field(default_factory=dict)

    def write(self, directory) -> Path:
        path = Path(directory) / "run.json"
        if not self.started_at:
            self.started_at = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        return write_manifest(path, asdict(self))


def output_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


def _synthetic(n, seed, noise):
    return generate_synthetic_scenes(SyntheticConfig.balanced(n, noise=noise), seed=seed)


def load_data(cfg: dict, data_arg=None, test_arg=None):
    """(train, test) scenes: caches when given, synthetic scenes otherwise."""
    d = cfg["data"]
    train_path = data_arg or d["scenes"]
    test_path = test_arg or d["test_scenes"]
    if train_path:
        train = load_scenes(train_path)
    else:
        train = _synthetic(d["synthetic_train"], d["seed"], d["noise"])
    if test_path:
        test = load_scenes(test_path)
    elif train_path:
        test = train
    else:
        # held-out synthetic scenes come from a different stream than training
        test = _synthetic(d["synthetic_test"], d["seed"] + 1_000_003, d["noise"])
    return train, test


def _write_report(path: Path, report) -> Path:
    return write_manifest(path, report.to_dict())


def _print_report(report, stream=sys.stdout):
    horizons = "  ".join(f"{h:g}s={v:.3f}" for h, v in zip(report.horizons, report.rmse_per_horizon))
    print(f"RMSE (m): {horizons}  avg={report.rmse_avg:.3f}  n={report.n_samples}", file=stream)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    out = output_dir(args, "synth")
    seed = args.seed if args.seed is not None else cfg["data"]["seed"]
    n = args.scenes if args.scenes is not None else cfg["data"]["synthetic_train"]
    noise = cfg["data"]["noise"]
    RunManifest("synth", cfg, seed, outputs={"scene_cache": str(out)}).write(out)
    scenes = _synthetic(n, seed, noise)
    save_scenes(out, scenes, meta={"generator": "synthetic", "seed": seed, "noise": noise})
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def cmd_train_teacher(args, cfg):
    out = output_dir(args, "train-teacher")
    train_cfg, loss_cfg, teacher_cfg, _ = build(cfg)
    RunManifest("train-teacher", cfg, train_cfg.seed,
                outputs={"final": str(out / "final"), "best": str(out / "best"),
                         "metrics": str(out / "metrics.csv"), "report": str(out / "report.json")}).write(out)
    train, test = load_data(cfg, args.data, args.test)
    res = train_teacher(train, train_cfg, teacher_cfg, loss_cfg, val=test, out_dir=out)
    report = evaluate(res.model, test, cfg["eval"]["point"])
    _write_report(out / "report.json", report)
    _print_report(report)
    return 0


def cmd_train_student(args, cfg):
    out = output_dir(args, "train-student")
    train_cfg, loss_cfg, _, student_cfg = build(cfg)
    teacher = None
    if not args.supervised:
        if not args.teacher:
            print("error: --teacher checkpoint is required (or pass --supervised)", file=sys.stderr)
            return EXIT_NO_TEACHER
        try:
            teacher = load_checkpoint(args.teacher).model
        except FileNotFoundError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_NO_TEACHER
    RunManifest("train-student", cfg, train_cfg.seed,
                outputs={"final": str(out / "final"), "best": str(out / "best"),
                         "metrics": str(out / "metrics.csv"), "report": str(out / "report.json"),
                         "teacher": args.teacher}).write(out)
    train, test = load_data(cfg, args.data, args.test)
    kdm = KdmState(learnable=cfg["kdm"]["learnable"])
    res = train_student(train, teacher, train_cfg, student_cfg, loss_cfg, kdm=kdm, val=test, out_dir=out)
    report = evaluate(res.model, test, cfg["eval"]["point"])
    _write_report(out / "report.json", report)
    _print_report(report)
    return 0


def cmd_evaluate(args, cfg):
    out = output_dir(args, "evaluate")
    ckpt = load_checkpoint(args.checkpoint)
    RunManifest("evaluate", cfg, int(ckpt.manifest.get("seed") or 0),
                outputs={"report": str(out / "report.json"), "checkpoint": args.checkpoint}).write(out)
    _, test = load_data(cfg, None, args.data) if args.data else load_data(cfg)
    report = evaluate(ckpt.model, test, cfg["eval"]["point"])
    _write_report(out / "report.json", report)
    _print_report(report)
    return 0


def cmd_ablate(args, cfg):
    if args.suite not in SUITES:
        print(f"error: unknown suite {args.suite!r}; valid suites: {', '.join(SUITES)}", file=sys.stderr)
        return EXIT_CONFIG
    out = output_dir(args, "ablate")
    train_cfg, loss_cfg, teacher_cfg, student_cfg = build(cfg)
    csv_path = out / f"ablation_{args.suite}.csv"
    RunManifest("ablate", cfg, train_cfg.seed, outputs={"table": str(csv_path)}).write(out)
    train, test = load_data(cfg, args.data, args.test)
    table = run_ablation(args.suite, train, test, AblationConfig(train_cfg, loss_cfg, teacher_cfg, student_cfg))
    table.to_csv(csv_path)
    for row in table.rows:
        print(f"{row.label:>12}  rmse_avg={row.report.rmse_avg:.3f}")
    return 0


def cmd_plot_density(args, cfg):
    from .plotting import plot_density

    ckpt = load_checkpoint(args.checkpoint)
    scenes = load_scenes(args.data)
    if not 0 <= args.scene_id < len(scenes):
        print(f"error: scene id {args.scene_id} out of range (0..{len(scenes) - 1})", file=sys.stderr)
        return EXIT_CONFIG
    scene = scenes[args.scene_id]
    if scene.future_frames == 0 or not np.isfinite(scene.target).all():
        print("error: scene has no future to plot against", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else output_dir(args, "plot-density") / f"scene_{args.scene_id}.png"
    RunManifest("plot-density", cfg, int(ckpt.manifest.get("seed") or 0), outputs={"image": str(out)}).write(out.parent)
    data = featurize([scene], ckpt.model.cfg.history_frames)
    p = cfg["plot"]
    plot_density(_forecast_arrays(ckpt.model, data), data.target_history[0, :, :2], data.future[0], out, nx=p["nx"], ny=p["ny"],
                 margin_sigma=p["margin_sigma"], title=f"scene {args.scene_id} ({ckpt.kind})")
    print(f"wrote {out}")
    return 0


def _forecast_arrays(model, tensors) -> dict:
    import torch

    model.eval()
    with torch.no_grad():
        fc = model(tensors.to_torch())
    arrays = fc.to_numpy()
    return {k: v[0] for k, v in arrays.items()}


def cmd_params(args, cfg):
    _, _, teacher_cfg, _ = build(cfg)
    dims = {k: v for k, v in cfg["student"].items() if k != "variant"}
    full_cfg, s_cfg = StudentConfig(**dims), StudentConfig.small(**dims)
    counts = {
        "teacher": count_parameters(TeacherModel(teacher_cfg)),
        "student": count_parameters(StudentModel(full_cfg)),
        "student_s": count_parameters(StudentModel(s_cfg)),
    }
    counts["ratio_s_to_student"] = counts["student_s"] / counts["student"]
    for k, v in counts.items():
        print(f"{k:>20}: {v:.3f}" if isinstance(v, float) else f"{k:>20}: {v:,}")
    if args.out:
        write_manifest(Path(args.out) / "params.json", counts)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train-teacher": cmd_train_teacher,
    "train-student": cmd_train_student,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "plot-density": cmd_plot_density,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hltp", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--out", help="output directory (default: $HLTP_OUTPUT_ROOT/<command>)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic scene cache"))
    p.add_argument("--scenes", type=int)
    p.add_argument("--seed", type=int)

    for name in ("train-teacher", "train-student", "ablate"):
        p = common(sub.add_parser(name))
        p.add_argument("--data", help="training scene cache (default: synthetic)")
        p.add_argument("--test", help="held-out scene cache")
    sub.choices["train-student"].add_argument("--teacher", help="teacher checkpoint directory")
    sub.choices["train-student"].add_argument("--supervised", action="store_true", help="train without a teacher")
    sub.choices["ablate"].add_argument("--suite", required=True, help=f"one of: {', '.join(SUITES)}")

    p = common(sub.add_parser("evaluate"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="scene cache to evaluate on (default: synthetic held-out)")

    p = common(sub.add_parser("plot-density"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id", type=int, default=0)

    common(sub.add_parser("params", help="print parameter counts of the configured models"))
    return ap


def _split_overrides(extra):
    overrides, rest = [], []
    for item in extra:
        if item.startswith("--") and "=" in item and "." in item.split("=", 1)[0]:
            overrides.append(item[2:])
        else:
            rest.append(item)
    return overrides, rest


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides, rest = _split_overrides(extra)
    if rest:
        print(f"error: unrecognized arguments: {' '.join(rest)}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, overrides)
        # fail on invalid values before any work starts
        build(cfg)
    except ConfigError as e:
        print(f"error: bad config key {e.key}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TypeError, ValueError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, cfg)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, FloatingPointError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
