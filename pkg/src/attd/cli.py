"""Command-line entry point: ``attd gen-data | train | eval | ablate | viz | selfcheck``.

Exit codes: 0 success, 1 property failure, 2 usage, 3 I/O, 4 artifact mismatch.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

from . import container, gridvqa
from .evalviz import ablation, check_compatible, compare_checkpoints, evaluate
from .model import ConfigMismatchError
from .trainloop import (
    MetricsLog,
    TrainConfig,
    load_checkpoint,
    load_model,
    train_stage1,
    train_stage2,
)

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_IO, EXIT_MISMATCH = 0, 1, 2, 3, 4

log = logging.getLogger("attd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _write_manifest(args, command: str, config: dict, artifacts: list[str], started: str,
                    dataset_dir: str | None = None) -> None:
    """One RunManifest per invocation, kept apart from the artifacts it describes."""
    run_dir = Path(args.manifest_dir or os.environ.get("ATTD_RUN_DIR", "runs"))
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "dataset_manifest_hash": gridvqa.manifest_hash(dataset_dir) if dataset_dir else None,
        "started": started,
        "finished": _now(),
        "artifacts": artifacts,
    }
    stamp = started.replace(":", "").replace("-", "").replace("+", "Z")[:22]
    path = run_dir / f"{command}-{stamp}-{os.getpid()}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc


def _merge(file_cfg: dict, flags: dict) -> dict:
    merged = dict(file_cfg)
    merged.update({k: v for k, v in flags.items() if v is not None})
    return merged


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise UsageError(f"--grid must look like HxW, got {text!r}") from None


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = _now()
    cfg = _merge(_load_config_file(args.config), {
        "seed": args.seed, "train": args.train, "val": args.val, "noise": args.noise, "d_visual": args.d_visual,
        "grid": args.grid,
    })
    h, w = _parse_grid(cfg.get("grid", "8x8"))
    try:
        grid_cfg = gridvqa.GridConfig(h=h, w=w, d_visual=int(cfg.get("d_visual", 32)),
                                      noise_sigma=float(cfg.get("noise", 0.1)))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    seed, n_train, n_val = int(cfg.get("seed", 1)), int(cfg.get("train", 4000)), int(cfg.get("val", 1000))
    if n_train < 1 or n_val < 1:
        raise UsageError("--train and --val must be >= 1")
    gridvqa.generate_dataset(args.out, n_train, n_val, grid_cfg, seed)
    manifest = json.loads((Path(args.out) / "manifest.json").read_text())
    _emit({"out": args.out, **manifest}, None)
    _write_manifest(args, "gen-data", {**cfg, "seed": seed}, [args.out], started, args.out)
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    flags = {
        "seed": args.seed, "batch_size": args.batch_size, "optimizer": args.optimizer, "lr": args.lr,
        "stage2_lr": args.stage2_lr, "kl_weight": args.kl_weight, "log_every": args.log_every,
        "checkpoint_dir": args.ckpt_dir,
    }
    if args.train_language is not None:
        flags["stage2_train_language"] = args.train_language
    cfg = _merge(_load_config_file(args.config), flags)
    if args.epochs is not None:
        if args.stage == "2":
            cfg["stage2_epochs"] = args.epochs
        else:
            cfg["stage1_epochs"] = args.epochs
    if args.stage2_epochs is not None:
        cfg["stage2_epochs"] = args.stage2_epochs
    cfg.setdefault("checkpoint_dir", "checkpoints")
    try:
        return TrainConfig(**cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from exc


def cmd_train(args) -> int:
    started = _now()
    if args.stage == "2" and not args.from_ckpt:
        raise UsageError("--stage 2 needs --from CHECKPOINT")
    config = _train_config(args)
    dataset = gridvqa.load_dataset(args.data)
    ckpt_dir = Path(config.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = Path(args.metrics) if args.metrics else ckpt_dir / "metrics.jsonl"
    if metrics_path.exists() and not args.from_ckpt:
        metrics_path.unlink()
    metrics = MetricsLog(metrics_path)
    state = load_checkpoint(args.from_ckpt) if args.from_ckpt else None
    if state is not None:
        check_compatible(state.model, dataset)
    if args.stage in ("1", "both"):
        if state is not None and state.stage != 1:
            raise ConfigMismatchError(f"{args.from_ckpt} is a stage-{state.stage} checkpoint")
        state, _ = train_stage1(dataset, config, state, metrics)
    if args.stage in ("2", "both"):
        state, _ = train_stage2(dataset, config, state, metrics)
    artifacts = sorted(str(p) for p in ckpt_dir.glob("stage*.ckpt")) + [str(metrics_path)]
    _emit({"stage": state.stage, "epoch": state.epoch, "step": state.step, "checkpoint_dir": str(ckpt_dir),
           "metrics": str(metrics_path)}, None)
    _write_manifest(args, "train", config.to_json(), artifacts, started, args.data)
    return EXIT_OK


def _load_for_eval(args):
    dataset = gridvqa.load_dataset(args.data)
    return dataset, dataset.split(args.split)


def cmd_eval(args) -> int:
    started = _now()
    dataset, samples = _load_for_eval(args)
    model = load_model(args.ckpt)
    check_compatible(model, dataset)
    report = evaluate(model, samples).as_dict()
    _emit(report, args.out)
    _write_manifest(args, "eval", {"ckpt": args.ckpt, "split": args.split}, [args.out] if args.out else [],
                    started, args.data)
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = _now()
    dataset, samples = _load_for_eval(args)
    model = load_model(args.ckpt)
    check_compatible(model, dataset)
    report = ablation(model, samples).as_dict()
    _emit(report, args.out)
    _write_manifest(args, "ablate", {"ckpt": args.ckpt, "split": args.split}, [args.out] if args.out else [],
                    started, args.data)
    return EXIT_OK


def cmd_viz(args) -> int:
    started = _now()
    dataset, samples = _load_for_eval(args)
    baseline, distilled = load_model(args.baseline), load_model(args.distilled)
    check_compatible(baseline, dataset)
    check_compatible(distilled, dataset)
    summary = compare_checkpoints(baseline, distilled, samples, args.out_dir, n_heatmaps=args.samples)
    _emit(summary, None)
    _write_manifest(args, "viz", {"baseline": args.baseline, "distilled": args.distilled, "split": args.split,
                                  "samples": args.samples}, summary["heatmaps"], started, args.data)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    started = _now()
    report = run_selfcheck()
    _emit(report.as_dict(), args.out)
    _write_manifest(args, "selfcheck", {}, [args.out] if args.out else [], started)
    if not report.passed:
        print(f"attd: selfcheck failed: {report.first_failure}", file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON file with defaults; explicit flags win")
        p.add_argument("--manifest-dir", help="where the run manifest goes (default: $ATTD_RUN_DIR or ./runs)")

    p = sub.add_parser("gen-data", help="generate a GridVQA dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--grid")
    p.add_argument("--noise", type=float)
    p.add_argument("--d-visual", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="two-stage training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--from", dest="from_ckpt")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="epochs for the selected stage (stage 1 for 'both')")
    p.add_argument("--stage2-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--lr", type=float)
    p.add_argument("--stage2-lr", type=float)
    p.add_argument("--kl-weight", type=float)
    p.add_argument("--train-language", action=argparse.BooleanOptionalAction, default=None,
                       help="update the language stream in stage 2 (default: on)")
    p.add_argument("--log-every", type=int)
    p.add_argument("--ckpt-dir")
    p.add_argument("--metrics", help="metrics log path (default: CKPT_DIR/metrics.jsonl)")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "accuracy and attention metrics"),
                                 ("ablate", cmd_ablate, "object-masking ablation")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", choices=("train", "val"), default="val")
        p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("viz", help="paired attention heatmaps for two checkpoints")
    common(p)
    p.add_argument("--baseline", required=True)
    p.add_argument("--distilled", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--out-dir", default="heatmaps")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("selfcheck", help="fast invariant suite")
    p.add_argument("--out")
    p.add_argument("--manifest-dir")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    threads = os.environ.get("ATTD_THREADS", "1")
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"attd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigMismatchError, gridvqa.DatasetError, container.ContainerError) as exc:
        print(f"attd: artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"attd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
