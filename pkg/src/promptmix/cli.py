"""Command-line surface: gen-data, train, eval, gradcheck, ablate, report.

Every command writes a run manifest before doing any work (a failed run
still leaves one behind) and finishes it with output hashes. Exit codes are
a stable contract: 0 success, 1 check failure, 2 usage or input error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import fields
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import generate_synthetic_dataset, load_dataset, save_dataset
from .encoders import EncoderSpec
from .errors import NumericAbort, PromptMixError
from .gradcheck import run_gradcheck
from .prompts import read_template_file
from .reporting import (
    merge_run_csvs,
    plot_kl_trace,
    plot_loss_curves,
    plot_shots_accuracy,
    read_csv,
    write_csv,
)
from .trainer import (
    METRIC_COLUMNS,
    TrainConfig,
    base_new_split,
    evaluate,
    few_shot_split,
    run_ablation,
    state_from_checkpoint,
    state_to_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

SEED_ENV_VAR = "PROMPTMIX_SEED"


def default_templates_path() -> str:
    return str(resources.files("promptmix").joinpath("templates/appendix_a.txt"))


# ---------------------------------------------------------------------------
# manifests


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def start_manifest(path: Path, command: str, argv: list[str], inputs: dict, seed, config: dict | None) -> dict:
    manifest = {
        "command": command,
        "argv": argv,
        "started": _now(),
        "finished": None,
        "seed": seed,
        "config": config,
        "inputs": {str(k): _sha256_file(v) for k, v in inputs.items()},
        "outputs": {},
        "status": "running",
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest


def finish_manifest(path: Path, manifest: dict, outputs: list, status: str = "ok") -> None:
    manifest["outputs"] = {str(p): _sha256_file(p) for p in outputs if Path(p).exists()}
    manifest["finished"] = _now()
    manifest["status"] = status
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def config_hash(config: TrainConfig, mode: str, data_sha: str, templates_sha: str) -> str:
    blob = json.dumps(
        {"config": config.to_dict(), "mode": mode, "data": data_sha, "templates": templates_sha},
        sort_keys=True,
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# config resolution: defaults < config file < flags < PROMPTMIX_SEED


_CONFIG_TYPES = {f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)}


def _parse_config_value(key: str, raw: str):
    kind = _CONFIG_TYPES[key]
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean {key} = {raw!r}")
    return kind(raw)


def parse_config_file(path) -> dict:
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise PromptMixError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_TYPES:
                raise PromptMixError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _parse_config_value(key, value)
            except ValueError as exc:
                raise PromptMixError(f"{path}:{lineno}: {exc}") from exc
    return values


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="config file (key = value, TrainConfig keys)")
    parser.add_argument("--experts", type=int, help="number of expert groups (0 = all in the template file)")
    parser.add_argument("--top-k", dest="top_k", type=int)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--weight-router", dest="weight_router", type=float)
    parser.add_argument("--weight-text", dest="weight_text", type=float)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--momentum", type=float)
    parser.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--shots", type=int)
    for flag in ("virtual_classes", "router_cls_grad", "renormalize_topk"):
        dashed = flag.replace("_", "-")
        group = parser.add_mutually_exclusive_group()
        group.add_argument(f"--{dashed}", dest=flag, action="store_true", default=None)
        group.add_argument(f"--no-{dashed}", dest=flag, action="store_false", default=None)


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for name in _CONFIG_TYPES:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            values[name] = flag_value
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise PromptMixError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from None
    return TrainConfig.from_dict(values)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args: argparse.Namespace) -> int:
    templates = Path(args.templates)
    groups = read_template_file(templates)
    n_groups = args.groups if args.groups else args.styles
    if args.styles > len(groups):
        raise PromptMixError(f"--styles {args.styles} exceeds the {len(groups)} groups in {templates}")
    if n_groups > len(groups) or n_groups < args.styles:
        raise PromptMixError(f"--groups must be between --styles and {len(groups)}, got {n_groups}")
    groups = groups[:n_groups]

    out = Path(args.out)
    manifest_path = out.with_name(out.name + ".manifest.json")
    manifest = start_manifest(
        manifest_path,
        "gen-data",
        args.argv,
        inputs={"templates": templates},
        seed=args.seed,
        config={
            "classes": args.classes,
            "styles": args.styles,
            "per_cell": args.per_cell,
            "sigma": args.sigma,
            "groups": n_groups,
            "encoder": {
                "seed": args.encoder_seed,
                "vocab_size": args.vocab_size,
                "embed_dim": args.embed_dim,
                "feature_dim": args.feature_dim,
                "input_dim": args.input_dim,
            },
        },
    )
    try:
        spec = EncoderSpec(
            seed=args.encoder_seed,
            vocab_size=args.vocab_size,
            embed_dim=args.embed_dim,
            feature_dim=args.feature_dim,
            input_dim=args.input_dim,
        )
        dataset = generate_synthetic_dataset(
            args.classes, args.styles, args.per_cell, args.sigma, args.seed, spec.build(), groups
        )
        save_dataset(dataset, out)
    except PromptMixError:
        finish_manifest(manifest_path, manifest, [], status="error")
        raise
    finish_manifest(manifest_path, manifest, [out])
    print(f"wrote {len(dataset)} examples to {out}")
    return EXIT_OK


def _load_dataset_and_groups(args: argparse.Namespace):
    data_path = Path(args.data)
    templates_path = Path(args.templates)
    dataset = load_dataset(data_path)
    groups = read_template_file(templates_path)
    return dataset, groups, data_path, templates_path


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    dataset, groups, data_path, templates_path = _load_dataset_and_groups(args)
    data_sha = _sha256_file(data_path)
    templates_sha = _sha256_file(templates_path)
    run_id = f"run-{config_hash(config, args.mode, data_sha, templates_sha)}"
    run_dir = Path(args.out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    manifest_path = run_dir / "manifest.json"
    manifest = start_manifest(
        manifest_path,
        "train",
        args.argv,
        inputs={"data": data_path, "templates": templates_path},
        seed=config.seed,
        config={**config.to_dict(), "mode": args.mode},
    )
    metrics_path = run_dir / "metrics.csv"
    ckpt_path = run_dir / "checkpoint.bin"
    try:
        if args.mode == "base-to-new":
            split = base_new_split(dataset, config.shots, config.seed)
        else:
            split = few_shot_split(dataset, config.shots, config.seed)
        resume_state = None
        if args.resume:
            resume_state = state_from_checkpoint(load_checkpoint(args.resume), dataset)
            config = resume_state.config
        state = train(config, dataset, groups, split, resume=resume_state)
        write_csv(metrics_path, METRIC_COLUMNS, state.metrics)
        save_checkpoint(state_to_checkpoint(state, dataset), ckpt_path)
    except NumericAbort as exc:
        dump_path = run_dir / "numeric_abort.json"
        dump_path.write_text(json.dumps(exc.diagnostics, indent=2) + "\n", encoding="utf-8")
        finish_manifest(manifest_path, manifest, [dump_path], status="numeric-abort")
        print(f"numeric abort: {exc} (diagnostics in {dump_path})", file=sys.stderr)
        return EXIT_NUMERIC
    except PromptMixError:
        finish_manifest(manifest_path, manifest, [], status="error")
        raise
    finish_manifest(manifest_path, manifest, [metrics_path, ckpt_path])
    last = state.metrics[-1] if state.metrics else None
    if last:
        print(f"trained {state.step} steps; final epoch loss_total={last[3]:.6f}")
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt_path = Path(args.checkpoint)
    data_path = Path(args.data)
    dataset = load_dataset(data_path)
    state = state_from_checkpoint(load_checkpoint(ckpt_path), dataset)
    out = Path(args.out) if args.out else ckpt_path.parent / "eval_report.csv"
    manifest_path = out.with_name(out.name + ".manifest.json")
    manifest = start_manifest(
        manifest_path,
        "eval",
        args.argv,
        inputs={"checkpoint": ckpt_path, "data": data_path},
        seed=state.config.seed,
        config=state.config.to_dict(),
    )
    try:
        report = evaluate(state, dataset)
        columns = ["split", "examples", "correct", "top1", "mode", "k", "shots", "seed"]
        rows = []
        for name, result in report.results.items():
            rows.append(
                [name, result.examples, result.correct, result.top1, report.mode, report.k,
                 state.split.shots, state.config.seed]
            )
        if report.harmonic is not None:
            rows.append(
                ["harmonic", 0, 0, report.harmonic / 100.0, report.mode, report.k,
                 state.split.shots, state.config.seed]
            )
        write_csv(out, columns, rows)
    except PromptMixError:
        finish_manifest(manifest_path, manifest, [], status="error")
        raise
    finish_manifest(manifest_path, manifest, [out])
    if report.mode == "base-to-new":
        base = 100.0 * report.results["base"].top1
        new = 100.0 * report.results["new"].top1
        h = report.harmonic if report.harmonic is not None else float("nan")
        print(f"base {base:.2f}  new {new:.2f}  H {h:.2f}")
    else:
        print(f"top1 {100.0 * report.results['test'].top1:.2f}")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    manifest_path = out_dir / "gradcheck.manifest.json"
    manifest = start_manifest(manifest_path, "gradcheck", args.argv, inputs={}, seed=args.seeds, config=None)
    report = run_gradcheck(seeds=args.seeds, eps=args.eps, tolerance=args.tolerance)
    report_path = out_dir / "gradcheck.txt"
    lines = report.lines()
    report_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    finish_manifest(manifest_path, manifest, [report_path], status="ok" if report.passed else "check-failed")
    for line in lines:
        print(line)
    if not report.passed:
        print(f"gradient check FAILED at tolerance {report.tolerance}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"gradient check passed ({report.seeds} seeds, eps {report.eps}, tolerance {report.tolerance})")
    return EXIT_OK


def _parse_seeds(raw: str) -> list[int]:
    if "," in raw:
        return [int(x) for x in raw.split(",") if x.strip()]
    return list(range(int(raw)))


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    dataset, groups, data_path, templates_path = _load_dataset_and_groups(args)
    seeds = _parse_seeds(args.seeds)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    manifest = start_manifest(
        manifest_path,
        "ablate",
        args.argv,
        inputs={"data": data_path, "templates": templates_path},
        seed=config.seed,
        config={**config.to_dict(), "axis": args.axis, "seeds": seeds},
    )
    table_path = out_dir / f"ablation_{args.axis}.csv"
    try:
        rows = run_ablation(config, dataset, groups, args.axis, seeds)
        columns = ["axis", "variant", "seed", "split_id", "top1"]
        write_csv(table_path, columns, [[r[c] for c in columns] for r in rows])
    except PromptMixError:
        finish_manifest(manifest_path, manifest, [], status="error")
        raise
    finish_manifest(manifest_path, manifest, [table_path])
    by_variant: dict[str, list[float]] = {}
    for r in rows:
        by_variant.setdefault(r["variant"], []).append(r["top1"])
    for variant in by_variant:
        mean = float(np.mean(by_variant[variant]))
        print(f"{variant:12s} mean top1 = {mean:.4f} over {len(by_variant[variant])} seeds")
    print(f"table written to {table_path}")
    return EXIT_OK


def _discover_run_dirs(paths: list[str]) -> list[Path]:
    found: list[Path] = []
    for raw in paths:
        p = Path(raw)
        if (p / "metrics.csv").exists():
            found.append(p)
            continue
        if p.is_dir():
            for child in sorted(p.iterdir()):
                if (child / "metrics.csv").exists():
                    found.append(child)
    return found


def cmd_report(args: argparse.Namespace) -> int:
    run_dirs = _discover_run_dirs(args.runs)
    if not run_dirs:
        print("error: no run directories with metrics.csv found", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "report.manifest.json"
    inputs = {f"metrics:{d.name}": d / "metrics.csv" for d in run_dirs}
    manifest = start_manifest(manifest_path, "report", args.argv, inputs=inputs, seed=None, config=None)

    outputs = []
    metric_csvs = {d.name: d / "metrics.csv" for d in run_dirs}
    merged_cols, merged_rows = merge_run_csvs(metric_csvs)
    merged_path = out_dir / "merged_metrics.csv"
    write_csv(merged_path, merged_cols, merged_rows)
    outputs.append(merged_path)

    runs = {d.name: read_csv(d / "metrics.csv") for d in run_dirs}
    loss_path = out_dir / "loss_curves.svg"
    plot_loss_curves(runs, loss_path)
    outputs.append(loss_path)
    kl_path = out_dir / "kl_trace.svg"
    plot_kl_trace(runs, kl_path)
    outputs.append(kl_path)

    # shots-vs-accuracy needs eval reports; runs without one are skipped
    points: list[tuple[int, float, str]] = []
    eval_csvs = {}
    for d in run_dirs:
        eval_path = d / "eval_report.csv"
        if not eval_path.exists():
            continue
        eval_csvs[d.name] = eval_path
        columns, rows = read_csv(eval_path)
        idx = {c: i for i, c in enumerate(columns)}
        for row in rows:
            if row[idx["split"]] == "harmonic":
                continue
            points.append((int(row[idx["shots"]]), float(row[idx["top1"]]), row[idx["split"]]))
    if eval_csvs:
        eval_cols, eval_rows = merge_run_csvs(eval_csvs)
        merged_eval_path = out_dir / "merged_eval.csv"
        write_csv(merged_eval_path, eval_cols, eval_rows)
        outputs.append(merged_eval_path)
    if points:
        shots_path = out_dir / "shots_vs_accuracy.svg"
        plot_shots_accuracy(points, shots_path)
        outputs.append(shots_path)

    finish_manifest(manifest_path, manifest, outputs)
    for p in outputs:
        print(f"wrote {p}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptmix",
        description="Mixture of soft prompts with a hard-template-guided router.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic style-clustered dataset")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--styles", type=int, default=4)
    p.add_argument("--per-cell", dest="per_cell", type=int, default=25)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--templates", default=default_templates_path())
    p.add_argument("--groups", type=int, default=0, help="leading template groups to use (default: --styles)")
    p.add_argument("--out", required=True)
    p.add_argument("--encoder-seed", dest="encoder_seed", type=int, default=0)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=4096)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=32)
    p.add_argument("--feature-dim", dest="feature_dim", type=int, default=64)
    p.add_argument("--input-dim", dest="input_dim", type=int, default=96)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train soft prompts and the router")
    p.add_argument("--data", required=True)
    p.add_argument("--templates", default=default_templates_path())
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--mode", choices=["few-shot", "base-to-new"], default="few-shot")
    p.add_argument("--resume", help="checkpoint to resume from (its config wins)")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="eval report CSV (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", default=".", help="directory for the report and manifest")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="component or top-k ablation sweeps")
    p.add_argument("--data", required=True)
    p.add_argument("--templates", default=default_templates_path())
    p.add_argument("--axis", choices=["components", "topk"], required=True)
    p.add_argument("--seeds", default="5", help="count (N -> seeds 0..N-1) or comma-separated list")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate run metrics into CSV and SVG figures")
    p.add_argument("--runs", nargs="+", required=True, help="run directories (or parents of them)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except NumericAbort as exc:  # commands without their own handler
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PromptMixError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
