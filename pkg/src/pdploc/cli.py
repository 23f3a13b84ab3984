"""Command-line interface for the localization pipeline.

Subcommands: `generate` (synthetic dataset), `train` (checkpoint + log),
`evaluate` (error CSVs + CDF plot), `flops` (preset cost table),
`attention` (per-sensor attention CSVs), `compare` (percentile table
across checkpoints).

Every command writes a JSON manifest next to its artifacts capturing the
tool version, full argv, seed, and the resolved configuration, so a run
can be reproduced exactly from the manifest alone.

Options can also come from a TOML file (--config): top-level keys set
defaults for every subcommand that understands them, a `[command]` table
sets defaults for one subcommand, and explicit flags win over both.

Thread pinning (--threads / PDPLOC_THREADS) must happen before numpy is
first imported, so this module imports the pipeline lazily inside the
command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__

__all__ = ["main", "build_parser", "write_manifest"]

THREADS_ENV = "PDPLOC_THREADS"
_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

PRESETS = tuple(
    f"{kind}-{size}" for kind in ("pbt", "tst", "sst") for size in ("small", "medium", "large")
)


def _pin_threads(n: int | None) -> None:
    """Set BLAS/OpenMP pool sizes; a no-op once numpy is already loaded."""
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return
        n = int(env)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def write_manifest(
    path: str | Path,
    *,
    command: str,
    argv: list[str],
    seed: int | None,
    configs: dict,
    inputs: list[str],
    outputs: list[str],
    wall_clock_s: float,
) -> None:
    data = {
        "tool": "pdploc",
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "seed": seed,
        "configs": configs,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "wall_clock_s": wall_clock_s,
    }
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared flag groups


def _resolve_model_flags(args, n_sensors: int, n_time_samples: int):
    """Build a ModelConfig from --preset or --tokenizer/--size plus --family."""
    from .model import preset_config

    if args.preset and (args.tokenizer or args.size):
        raise ValueError("pass either --preset or --tokenizer/--size, not both")
    if args.preset:
        kind, _, size = args.preset.partition("-")
    else:
        if not (args.tokenizer and args.size):
            raise ValueError("need --preset, or both --tokenizer and --size")
        kind, size = args.tokenizer, args.size
    return preset_config(
        kind,
        size,
        family=args.family,
        n_sensors=n_sensors,
        n_time_samples=n_time_samples,
        hidden_dim=args.hidden_dim,
    )


def _resolve_augmentations(spec: str, n_sensors: int):
    from .augment import AugmentConfig

    names = {"drop", "shift", "mixup"}
    if spec == "all":
        chosen = names
    elif spec == "none":
        chosen = set()
    else:
        chosen = {part.strip() for part in spec.split(",") if part.strip()}
        unknown = chosen - names
        if unknown:
            raise ValueError(f"unknown augmentation(s) {sorted(unknown)}; choose from {sorted(names)}")
    return AugmentConfig(
        d_max=min(7, n_sensors),
        enable_drop="drop" in chosen,
        enable_shift="shift" in chosen,
        enable_mixup="mixup" in chosen,
    )


def _add_model_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--preset", choices=PRESETS, help="tokenizer-size pair, e.g. sst-small")
    sp.add_argument("--tokenizer", choices=("pbt", "tst", "sst"))
    sp.add_argument("--size", choices=("small", "medium", "large"))
    sp.add_argument("--family", choices=("vanilla", "lswiglu"), default="lswiglu")
    sp.add_argument("--hidden-dim", type=_positive_int, default=None,
                    help="override the preset FFN width")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, argv: list[str]) -> int:
    from .dataio import GeneratorConfig, default_layout, generate_dataset, write_dataset, write_labels_csv

    start = time.perf_counter()
    layout = default_layout(rows=args.rows, cols=args.cols, spacing=args.spacing, margin=args.margin)
    gen = GeneratorConfig(n_time_samples=args.time_samples, rng_seed=args.seed)
    samples = generate_dataset(layout, gen, args.samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(out, samples)
    outputs = [str(out)]
    if args.labels_csv:
        write_labels_csv(args.labels_csv, samples)
        outputs.append(args.labels_csv)
    wall = time.perf_counter() - start
    write_manifest(
        f"{out}.manifest.json",
        command="generate",
        argv=argv,
        seed=args.seed,
        configs={
            "generator": asdict(gen),
            "layout": {"rows": args.rows, "cols": args.cols,
                       "spacing": args.spacing, "margin": args.margin},
        },
        inputs=[],
        outputs=outputs,
        wall_clock_s=wall,
    )
    print(
        f"wrote {len(samples)} samples ({layout.n_sensors} sensors x "
        f"{gen.n_time_samples} bins) to {out} in {wall:.2f}s"
    )
    return 0


def cmd_train(args, argv: list[str]) -> int:
    from .compression import CompressionParams
    from .dataio import read_dataset
    from .model import save_checkpoint
    from .train import TrainConfig, train, write_training_log

    start = time.perf_counter()
    dataset = read_dataset(args.dataset)
    n_sensors, n_time = dataset[0].powers.shape
    model_cfg = _resolve_model_flags(args, n_sensors, n_time)
    train_cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr_min=args.lr_min,
        lr_max=args.lr_max,
        ema_per_step=args.ema_per_step,
        seed=args.seed,
        dtype=args.dtype,
    )
    aug_cfg = _resolve_augmentations(args.aug, n_sensors)
    comp = CompressionParams()
    result = train(dataset, model_cfg, train_cfg, aug_cfg=aug_cfg, comp=comp)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"compression": asdict(comp), "train": asdict(train_cfg), "augment": asdict(aug_cfg)}
    save_checkpoint(out, model_cfg, result.params, result.ema_params, meta=meta)
    log_path = f"{out}.log.csv"
    write_training_log(log_path, result)
    wall = time.perf_counter() - start
    from .model import config_to_dict

    write_manifest(
        f"{out}.manifest.json",
        command="train",
        argv=argv,
        seed=args.seed,
        configs={"model": config_to_dict(model_cfg), **meta},
        inputs=[args.dataset],
        outputs=[str(out), log_path],
        wall_clock_s=wall,
    )
    print(
        f"trained {model_cfg.family}/{model_cfg.tokenizer.kind} for {args.epochs} epochs: "
        f"final loss {result.loss_history[-1]:.4f}, wrote {out} in {wall:.1f}s"
    )
    return 0


def cmd_evaluate(args, argv: list[str]) -> int:
    from .compression import CompressionParams
    from .dataio import read_dataset
    from .evaluation import evaluate, predict, write_cdf_svg, write_errors_csv, write_summary_csv
    from .model import load_checkpoint

    start = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.dataset)
    comp = CompressionParams(**ckpt.meta["compression"]) if "compression" in ckpt.meta else CompressionParams()
    summary = evaluate(ckpt, dataset, comp=comp)
    preds = predict(ckpt.ema_params, ckpt.config, dataset, comp=comp)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    errors_csv = out_dir / "errors.csv"
    summary_csv = out_dir / "summary.csv"
    cdf_svg = out_dir / "cdf.svg"
    write_errors_csv(errors_csv, dataset, preds, summary.errors)
    write_summary_csv(summary_csv, summary)
    write_cdf_svg(cdf_svg, summary)
    wall = time.perf_counter() - start
    from .model import config_to_dict

    write_manifest(
        out_dir / "manifest.json",
        command="evaluate",
        argv=argv,
        seed=None,
        configs={"model": config_to_dict(ckpt.config), "checkpoint_meta": ckpt.meta},
        inputs=[args.checkpoint, args.dataset],
        outputs=[str(errors_csv), str(summary_csv), str(cdf_svg)],
        wall_clock_s=wall,
    )
    print(
        f"{summary.n_samples} samples: mean {summary.mean:.3f} m, "
        f"d50 {summary.d50:.3f} m, d90 {summary.d90:.3f} m -> {out_dir}"
    )
    return 0


def cmd_flops(args, argv: list[str]) -> int:
    from .model import budget_for, count_flops, preset_config

    rows = []
    presets = [args.preset] if args.preset else list(PRESETS)
    for preset in presets:
        kind, _, size = preset.partition("-")
        cfg = preset_config(
            kind, size, family=args.family,
            n_sensors=args.sensors, hidden_dim=args.hidden_dim,
        )
        flops = count_flops(cfg)
        budget = budget_for(size, n_sensors=args.sensors) if kind == "sst" or args.sensors == 18 else None
        if budget:
            ratio = flops / budget
            verdict = "PASS" if abs(ratio - 1.0) <= 0.25 else "FAIL"
            rows.append((preset, flops, f"{budget / 1e6:.1f}M", f"{ratio:.3f}", verdict))
        else:
            rows.append((preset, flops, "-", "-", "-"))
    print(f"{'preset':<12} {'family':<8} {'flops':>12} {'budget':>8} {'ratio':>7} verdict")
    for preset, flops, budget, ratio, verdict in rows:
        print(f"{preset:<12} {args.family:<8} {flops:>12,} {budget:>8} {ratio:>7} {verdict}")
    return 0


def cmd_attention(args, argv: list[str]) -> int:
    from .dataio import read_dataset
    from .compression import CompressionParams
    from .evaluation import sensor_attention_report, write_attention_csv
    from .model import load_checkpoint

    start = time.perf_counter()
    ckpt = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.dataset)
    if args.samples:
        dataset = dataset[: args.samples]
    comp = CompressionParams(**ckpt.meta["compression"]) if "compression" in ckpt.meta else CompressionParams()
    report = sensor_attention_report(
        ckpt.ema_params, ckpt.config, dataset, comp=comp, layers=args.layers
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for layer, scores in report.items():
        path = out_dir / f"attention_layer{layer}.csv"
        write_attention_csv(path, scores)
        outputs.append(str(path))
    svg = out_dir / "attention.svg"
    _plot_attention(svg, report)
    outputs.append(str(svg))
    wall = time.perf_counter() - start
    from .model import config_to_dict

    write_manifest(
        out_dir / "manifest.json",
        command="attention",
        argv=argv,
        seed=None,
        configs={"model": config_to_dict(ckpt.config)},
        inputs=[args.checkpoint, args.dataset],
        outputs=outputs,
        wall_clock_s=wall,
    )
    for layer, scores in report.items():
        top = int(scores.argmax())
        print(f"layer {layer}: top sensor {top} ({scores[top]:.3f} of attention mass)")
    print(f"wrote {len(outputs)} files to {out_dir}")
    return 0


def _plot_attention(path: Path, report: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for layer, scores in report.items():
        ax.plot(range(len(scores)), scores, marker="o", markersize=3, label=f"layer {layer}")
    ax.set_xlabel("sensor index")
    ax.set_ylabel("mean attention share")
    ax.grid(True, alpha=0.3)
    if len(report) <= 10:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_compare(args, argv: list[str]) -> int:
    import csv as _csv

    from .compression import CompressionParams
    from .dataio import read_dataset
    from .evaluation import evaluate
    from .model import load_checkpoint

    start = time.perf_counter()
    dataset = read_dataset(args.dataset)
    rows = []
    for path in args.checkpoints:
        ckpt = load_checkpoint(path)
        comp = CompressionParams(**ckpt.meta["compression"]) if "compression" in ckpt.meta else CompressionParams()
        s = evaluate(ckpt, dataset, comp=comp)
        rows.append(
            {
                "checkpoint": Path(path).name,
                "family": ckpt.config.family,
                "tokenizer": ckpt.config.tokenizer.kind,
                "d50_m": s.d50,
                "d67_m": s.d67,
                "d80_m": s.d80,
                "d90_m": s.d90,
                "mean_m": s.mean,
            }
        )
    header = f"{'checkpoint':<28} {'family':<8} {'tok':<4} {'d50':>7} {'d67':>7} {'d80':>7} {'d90':>7} {'mean':>7}"
    print(header)
    for r in rows:
        print(
            f"{r['checkpoint']:<28} {r['family']:<8} {r['tokenizer']:<4} "
            f"{r['d50_m']:>7.3f} {r['d67_m']:>7.3f} {r['d80_m']:>7.3f} "
            f"{r['d90_m']:>7.3f} {r['mean_m']:>7.3f}"
        )
    best = min(rows, key=lambda r: r["d90_m"])
    print(f"best d90: {best['checkpoint']} ({best['d90_m']:.3f} m)")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        table = out_dir / "compare.csv"
        with table.open("w", newline="") as f:
            writer = _csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        write_manifest(
            out_dir / "manifest.json",
            command="compare",
            argv=argv,
            seed=None,
            configs={},
            inputs=[args.dataset, *args.checkpoints],
            outputs=[str(table)],
            wall_clock_s=time.perf_counter() - start,
        )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdploc",
        description="Transformer-based indoor localization from distributed power delay profiles.",
    )
    parser.add_argument("--version", action="version", version=f"pdploc {__version__}")
    parser.add_argument("--config", help="TOML file with default option values")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help=f"BLAS/OpenMP thread count (default: ${THREADS_ENV} or library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("generate", help="synthesize a PDP dataset")
    sp.add_argument("--samples", type=_positive_int)
    sp.add_argument("--out", help="output dataset path")
    sp.set_defaults(_required=("--samples", "--out"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--time-samples", type=_positive_int, default=128)
    sp.add_argument("--rows", type=_positive_int, default=3)
    sp.add_argument("--cols", type=_positive_int, default=6)
    sp.add_argument("--spacing", type=float, default=20.0)
    sp.add_argument("--margin", type=float, default=10.0)
    sp.add_argument("--labels-csv", default=None, help="also write labels to this CSV")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train a model and write a checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--out", help="checkpoint output path")
    sp.set_defaults(_required=("--dataset", "--out"))
    _add_model_flags(sp)
    sp.add_argument("--epochs", type=_positive_int, default=2000)
    sp.add_argument("--batch-size", type=_positive_int, default=400)
    sp.add_argument("--lr-min", type=float, default=1e-5)
    sp.add_argument("--lr-max", type=float, default=2e-3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    sp.add_argument("--ema-per-step", action="store_true")
    sp.add_argument("--aug", default="all",
                    help='"all", "none", or comma list from {drop,shift,mixup}')
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="compute error statistics for a checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--out", default="eval_out", help="output directory")
    sp.set_defaults(func=cmd_evaluate, _required=("--checkpoint", "--dataset"))

    sp = sub.add_parser("flops", help="per-preset FLOPs vs published budgets")
    sp.add_argument("--preset", choices=PRESETS, default=None, help="default: all presets")
    sp.add_argument("--family", choices=("vanilla", "lswiglu"), default="vanilla")
    sp.add_argument("--sensors", type=_positive_int, default=18)
    sp.add_argument("--hidden-dim", type=_positive_int, default=None)
    sp.set_defaults(func=cmd_flops)

    sp = sub.add_parser("attention", help="per-sensor attention share CSVs")
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset")
    sp.set_defaults(_required=("--checkpoint", "--dataset"))
    sp.add_argument("--out", default="attention_out", help="output directory")
    sp.add_argument("--layers", type=_int_list, default=None, help="comma list, default all")
    sp.add_argument("--samples", type=_positive_int, default=None, help="cap evaluated samples")
    sp.set_defaults(func=cmd_attention)

    sp = sub.add_parser("compare", help="side-by-side percentile table for checkpoints")
    sp.add_argument("checkpoints", nargs="+", metavar="CHECKPOINT")
    sp.add_argument("--dataset")
    sp.add_argument("--out", default=None, help="also write compare.csv here")
    sp.set_defaults(func=cmd_compare, _required=("--dataset",))

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, path: str) -> None:
    """Install TOML values as argparse defaults (explicit flags still win)."""
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib

    with open(path, "rb") as f:
        data = tomllib.load(f)

    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    commands = sub_actions[0].choices
    scalars = {k: v for k, v in data.items() if not isinstance(v, dict)}
    tables = {k: v for k, v in data.items() if isinstance(v, dict)}
    unknown_tables = set(tables) - set(commands)
    if unknown_tables:
        raise ValueError(f"config section(s) {sorted(unknown_tables)} match no command")
    used_scalars = set()
    for name, sp in commands.items():
        dests = {a.dest for a in sp._actions}
        defaults = {k: v for k, v in scalars.items() if k in dests}
        used_scalars |= set(defaults)
        for k, v in tables.get(name, {}).items():
            if k not in dests:
                raise ValueError(f"config key [{name}] {k} matches no {name} option")
            defaults[k] = v
        if defaults:
            sp.set_defaults(**defaults)
    unused = set(scalars) - used_scalars
    if unused:
        raise ValueError(f"config key(s) {sorted(unused)} match no command option")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    pre.add_argument("--threads", type=_positive_int, default=None)
    known, _ = pre.parse_known_args(argv)
    try:
        _pin_threads(known.threads)
        parser = build_parser()
        if known.config:
            _apply_config_file(parser, known.config)
        args = parser.parse_args(argv)
        missing = [
            flag
            for flag in getattr(args, "_required", ())
            if getattr(args, flag.lstrip("-").replace("-", "_")) is None
        ]
        if missing:  # required unless supplied by flag or config file
            parser.error("the following arguments are required: " + ", ".join(missing))
        return args.func(args, argv)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
