"""Command-line front end: synth, train, calibrate, evaluate, compare.

Every command echoes its resolved configuration to a JSON file next to its
outputs, and all table/record outputs are byte-reproducible for identical
inputs and flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    CalibratedConfidence,
    CalibratorConfig,
    calibrate,
    calibrated_pairs,
    clamp_count,
    train_calibrator,
    uncalibrated_pairs,
)
from .dumps import DumpError, FeatureDump, load_dump
from .gp import GPFitError, GPModel
from .metrics import (
    MetricsReport,
    brier_multiclass,
    nll_multiclass,
    reliability,
    report_from_pairs,
)
from .synthetic import SyntheticSpec, generate
from .temperature import apply_temperature, fit_temperature, logits_from_softmax


def _parse_layers(text: str) -> tuple[int, ...]:
    """'1-5' / '1,3,5' / '2' / '1-3,5' -> sorted tuple of layer indices."""
    out: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise argparse.ArgumentTypeError(f"bad layer range {part!r}")
            out.update(range(lo, hi + 1))
        elif part:
            out.add(int(part))
    if not out:
        raise argparse.ArgumentTypeError(f"no layers in {text!r}")
    return tuple(sorted(out))


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def _write_table(path: Path, header: list[str], rows: list[list], fmt: str) -> None:
    if fmt == "tsv":
        lines = ["\t".join(header)]
        lines += ["\t".join(_fmt(v) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n")
    else:
        lines = [
            json.dumps({k: v for k, v in zip(header, row)}, sort_keys=True)
            for row in rows
        ]
        path.write_text("\n".join(lines) + "\n")


def _echo_config(path: Path, command: str, args: argparse.Namespace) -> None:
    skip = {"func"}
    payload = {
        "command": command,
        "layergp_version": __version__,
        "args": {k: v for k, v in sorted(vars(args).items()) if k not in skip and k != "command"},
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n")


def _method_cli_to_lib(name: str) -> str:
    return name.replace("-", "_")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_train=args.n_train,
        n_test=args.n_test,
        k_classes=args.classes,
        layer_dims=tuple(int(d) for d in args.layer_dims.split(",")),
        overconfidence_bias=args.bias,
        label_noise=args.label_noise,
        seed=args.seed,
        channels=args.channels,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = generate(spec, out)
    _echo_config(out / "run_config.json", "synth", args)
    print(f"wrote {out / 'train'} (n={train.n}) and {out / 'test'} (n={test.n})")
    return 0


def cmd_train(args) -> int:
    cfg = CalibratorConfig(
        method=_method_cli_to_lib(args.method),
        layers=args.layers,
        pooling=args.pooling,
        base=args.base,
        iters=args.iters,
        learning_rate=args.lr,
        seed=args.seed,
    )
    dump = load_dump(args.dump)
    model = train_calibrator(dump, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    _echo_config(out.with_suffix(out.suffix + ".config.json"), "train", args)
    print(f"final log marginal likelihood: {model.final_lml():.6f}")
    print(f"wrote {out}")
    return 0


def _calibrated_rows(calibrated: list[CalibratedConfidence]) -> list[list]:
    return [
        [i, c.raw, c.mean_clamped, c.mean, c.variance, c.correctness]
        for i, c in enumerate(calibrated)
    ]


def cmd_calibrate(args) -> int:
    model = GPModel.load(args.model)
    dump = load_dump(args.dump)
    calibrated = calibrate(model, dump, args.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_table(
        out,
        ["index", "raw", "calibrated", "calibrated_unclamped", "variance", "correctness"],
        _calibrated_rows(calibrated),
        args.format,
    )
    _echo_config(out.with_suffix(out.suffix + ".config.json"), "calibrate", args)
    print(f"wrote {out} ({len(calibrated)} records, {clamp_count(calibrated)} clamped)")
    return 0


def _residual_rows(calibrated: list[CalibratedConfidence]) -> list[list]:
    rows = []
    for i, c in enumerate(calibrated):
        sd = float(np.sqrt(c.variance))
        pred = c.mean - c.raw
        rows.append(
            [i, c.raw, c.correctness, c.correctness - c.raw, pred, sd, pred - 2 * sd, pred + 2 * sd]
        )
    return rows


def cmd_evaluate(args) -> int:
    model = GPModel.load(args.model)
    dump = load_dump(args.dump)
    calibrated = calibrate(model, dump, args.mode)
    pairs = calibrated_pairs(calibrated)
    report = report_from_pairs(pairs, bin_count=args.bins, clamp_count=clamp_count(calibrated))
    diagram = reliability(pairs, args.bins)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(report.to_record())
    _write_table(
        out / f"reliability.{args.format_ext}",
        ["bin_lo", "bin_hi", "count", "confidence", "accuracy"],
        [list(r) for r in diagram.table_rows()],
        args.format,
    )
    residual_header = [
        "index", "raw", "correctness", "residual",
        "predicted_mean", "predicted_sd", "lo_2sd", "hi_2sd",
    ]
    residual_rows = _residual_rows(calibrated)
    _write_table(out / f"residuals.{args.format_ext}", residual_header, residual_rows, args.format)
    _echo_config(out / "run_config.json", "evaluate", args)

    if args.figures:
        from . import report as figs

        figs.save_reliability_figure(
            diagram, out / "reliability.png", title=f"{model.config.get('method', 'gp')} {args.mode}"
        )
        rows = np.array([r[1:] for r in residual_rows], dtype=float)
        figs.save_residual_fit_figure(
            residual=rows[:, 2],
            predicted_mean=rows[:, 3],
            predicted_sd=rows[:, 4],
            path=out / "residual_fit.png",
            title=f"{model.config.get('method', 'gp')} {args.mode}",
            sort_by=rows[:, 0],
        )
    print(report.to_record(), end="")
    print(f"wrote {out}")
    return 0


def _compare_row(label, pooling, pairs, bins, clamped, mean_var, note="-"):
    report = report_from_pairs(pairs, bin_count=bins, clamp_count=clamped)
    return (
        [
            pooling,
            label,
            report.ece,
            report.mce,
            report.nll,
            report.brier,
            "-",
            "-",
            _fmt(mean_var) if mean_var is not None else "-",
            clamped,
            note,
        ],
        report,
    )


def cmd_compare(args) -> int:
    train_dump = load_dump(args.train_dump)
    test_dump = load_dump(args.test_dump)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bins = args.bins
    poolings = ["max", "avg"] if args.pooling == "both" else [args.pooling]

    header = [
        "pooling", "method", "ece", "mce", "nll", "brier",
        "nll_multiclass", "brier_multiclass", "mean_variance", "clamp_count", "note",
    ]
    rows: list[list] = []
    diagrams = {}

    uncal = uncalibrated_pairs(test_dump)
    row, _ = _compare_row("uncalibrated", "-", uncal, bins, 0, None)
    row[6] = nll_multiclass(test_dump.softmax, test_dump.labels)
    row[7] = brier_multiclass(test_dump.softmax, test_dump.labels)
    rows.append(row)
    diagrams["uncalibrated"] = reliability(uncal, bins)

    fit_logits = train_dump.logits if train_dump.logits is not None else logits_from_softmax(train_dump.softmax)
    test_logits = test_dump.logits if test_dump.logits is not None else logits_from_softmax(test_dump.softmax)
    tm = fit_temperature(fit_logits, train_dump.labels, init_t=args.init_t)
    scaled = apply_temperature(test_logits, tm.temperature)
    corr = (test_dump.labels == test_dump.predictions).astype(float)
    ts_pairs = np.column_stack([scaled.max(axis=1), corr])
    row, _ = _compare_row("temperature_scaled", "-", ts_pairs, bins, 0, None,
                          note=f"T={tm.temperature:.6g}")
    row[6] = nll_multiclass(scaled, test_dump.labels)
    row[7] = brier_multiclass(scaled, test_dump.labels)
    rows.append(row)
    diagrams["temperature_scaled"] = reliability(ts_pairs, bins)

    residual_figs = {}
    for pooling in poolings:
        for layer in args.layers:
            cfg = CalibratorConfig(
                method="single_gp", layers=(layer,), pooling=pooling,
                iters=args.iters, learning_rate=args.lr, seed=args.seed,
            )
            model = train_calibrator(train_dump, cfg)
            cal = calibrate(model, test_dump, "global")
            label = f"single_gp L{layer}"
            row, _ = _compare_row(
                label, pooling, calibrated_pairs(cal), bins, clamp_count(cal),
                float(np.mean([c.variance for c in cal])),
            )
            rows.append(row)
            diagrams[f"{pooling} {label}"] = reliability(calibrated_pairs(cal), bins)
            residual_figs[f"{pooling}_single_gp_L{layer}"] = cal

        for method in ("sal_ml", "sal_hl"):
            cfg = CalibratorConfig(
                method=method, layers=args.layers, pooling=pooling,
                iters=args.iters, learning_rate=args.lr, seed=args.seed,
            )
            model = train_calibrator(train_dump, cfg)
            modes = ["global"] + [f"local:{l}" for l in args.layers]
            for mode in modes:
                cal = calibrate(model, test_dump, mode)
                tag = "G" if mode == "global" else f"L{mode.split(':')[1]}"
                label = f"{method} {tag}"
                row, _ = _compare_row(
                    label, pooling, calibrated_pairs(cal), bins, clamp_count(cal),
                    float(np.mean([c.variance for c in cal])),
                )
                rows.append(row)
                diagrams[f"{pooling} {label}"] = reliability(calibrated_pairs(cal), bins)
                if mode == "global":
                    residual_figs[f"{pooling}_{method}_G"] = cal

    _write_table(out / f"comparison.{args.format_ext}", header, rows, args.format)
    _echo_config(out / "run_config.json", "compare", args)

    if args.figures:
        from . import report as figs

        fig_dir = out / "figures"
        fig_dir.mkdir(exist_ok=True)
        figs.save_comparison_figure(diagrams, fig_dir / "comparison.png")
        for slug, cal in residual_figs.items():
            arr = np.array(
                [[c.raw, c.correctness - c.raw, c.mean - c.raw, np.sqrt(c.variance)] for c in cal]
            )
            figs.save_residual_fit_figure(
                residual=arr[:, 1], predicted_mean=arr[:, 2], predicted_sd=arr[:, 3],
                path=fig_dir / f"residual_{slug}.png", title=slug, sort_by=arr[:, 0],
            )
    print(f"wrote {out / ('comparison.' + args.format_ext)} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layergp",
        description="GP-based post-hoc confidence calibration over per-layer features",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (default: all cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic train/test dump pair")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=300)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--layer-dims", default="8,12,16,20,24")
    p.add_argument("--bias", type=float, default=0.0)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a calibrator on a dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=["single-gp", "sal-ml", "sal-hl"], required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--layers", type=_parse_layers)
    group.add_argument("--layer", type=int)
    p.add_argument("--pooling", choices=["max", "avg"], default="avg")
    p.add_argument("--base", choices=["matern25", "rbf"], default="matern25")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="apply a trained model to a test dump")
    p.add_argument("--model", required=True)
    p.add_argument("--dump", required=True)
    p.add_argument("--mode", default="global")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["tsv", "jsonlines"], default="tsv")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", help="metrics, reliability and residual tables + figures")
    p.add_argument("--model", required=True)
    p.add_argument("--dump", required=True)
    p.add_argument("--mode", default="global")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--format", choices=["tsv", "jsonlines"], default="tsv")
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="Table-style grid over methods, layers and pooling")
    p.add_argument("--train-dump", required=True)
    p.add_argument("--test-dump", required=True)
    p.add_argument("--layers", type=_parse_layers, required=True)
    p.add_argument("--pooling", choices=["max", "avg", "both"], default="both")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--init-t", type=float, default=1.0)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=["tsv", "jsonlines"], default="tsv")
    p.add_argument("--no-figures", dest="figures", action="store_false")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "layer", None) is not None:
        args.layers = (args.layer,)
    args.format_ext = "tsv" if getattr(args, "format", "tsv") == "tsv" else "jsonl"

    def run():
        try:
            return args.func(args)
        except (DumpError, GPFitError, ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1

    if args.threads:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            print("warning: threadpoolctl unavailable, --threads ignored", file=sys.stderr)
            return run()
        with threadpool_limits(limits=args.threads):
            return run()
    return run()


if __name__ == "__main__":
    sys.exit(main())
