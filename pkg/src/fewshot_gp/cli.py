"""``fewshot-gp`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from .data import (
    DatasetError,
    SyntheticConfig,
    generate_synthetic,
    load_csv,
    normalize,
    read_records,
    write_csv,
    write_records,
)
from .evaluate import (
    ABLATIONS,
    SWEEP_AXES,
    EvalReport,
    ExperimentConfig,
    GridSpec,
    ablate,
    evaluate,
    load_trained,
    parse_method,
    predict_grid,
    prepare_split,
    run_seed,
    save_trained,
    sweep,
    train_method,
    write_manifest,
)
from .trainer import TrainingAborted

log = logging.getLogger("fewshot_gp")

EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seeds", None) is not None:
        overrides.append(f"seeds={args.seeds}")
    if getattr(args, "methods", None) is not None:
        overrides.append(f"methods={_csv_list(args.methods)}")
    return ExperimentConfig.from_file(args.config, overrides)


def cmd_generate_data(args) -> None:
    syn = SyntheticConfig.from_file(args.config) if args.config else SyntheticConfig()
    if args.seed is not None:
        syn = SyntheticConfig(**{**syn.to_dict(), "seed": args.seed})
    raw = generate_synthetic(syn)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(raw, out)
    _, records = normalize(raw)
    write_records(records, out.with_suffix(".records.json"))
    cfg = ExperimentConfig(synthetic=syn.to_dict(), seeds=(syn.seed,))
    write_manifest(out.with_suffix(".manifest.json"), cfg, [syn.seed], {syn.seed: raw.fingerprint()},
                   "generate-data")
    print(f"wrote {len(raw)} tasks to {out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    data, fp = prepare_split(cfg, seed)
    spec = parse_method(args.method)
    t = train_method(spec, cfg, data, seed, out / "train_log.csv")
    save_trained(out / "model.ckpt", t, cfg, seed)
    write_manifest(out / "manifest.json", cfg, [seed], {seed: fp}, "train", method=spec.name,
                   best_episode=t.result.best_episode, best_val=t.result.best_val)
    print(f"{spec.name}: best validation {t.result.best_val:.6g} at episode {t.result.best_episode}")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    out = Path(args.out_dir)
    report = EvalReport(policy=cfg.policy)
    hashes = {}
    if args.checkpoint:
        seed = args.seed if args.seed is not None else cfg.seeds[0]
        data, hashes[seed] = prepare_split(cfg, seed)
        models = {}
        for path in args.checkpoint:
            model, params, meta = load_trained(path)
            name = meta.get("method", Path(path).stem)
            models[name if name not in models else str(path)] = (model, params)
        report = evaluate(models, data.target, cfg.n_support, cfg.n_repeats, seed, cfg.policy)
    else:
        for seed in cfg.seeds:
            part, trained = run_seed(cfg, seed, cfg.methods, out_dir=out / "logs")
            report.extend(part)
            if args.save_checkpoints:
                for name, t in trained.items():
                    save_trained(out / "checkpoints" / f"{name}_seed{seed}.ckpt", t, cfg, seed)
            hashes[seed] = prepare_split(cfg, seed)[1] if cfg.csv is None else load_csv(cfg.csv).fingerprint()
    report.write(out)
    write_manifest(out / "manifest.json", cfg, sorted(hashes), hashes, "evaluate")
    _print_summary(report)


def cmd_sweep(args) -> None:
    cfg = _config(args)
    rows = sweep(cfg, args.axis, args.values, out_dir=args.out_dir)
    write_manifest(Path(args.out_dir) / "manifest.json", cfg, cfg.seeds, _hashes(cfg), "sweep",
                   axis=args.axis, values=args.values)
    for r in rows:
        print(f"{r['axis']}={r['value']:<4} {r['method']:<12} {r['mean']:.4f} +- {r['se']:.4f}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    variants = _csv_list(args.variants) if args.variants else list(ABLATIONS)
    table, _ = ablate(cfg, variants, out_dir=args.out_dir)
    write_manifest(Path(args.out_dir) / "manifest.json", cfg, cfg.seeds, _hashes(cfg), "ablate",
                   variants=variants)
    for row in table:
        print(row)


def cmd_predict_grid(args) -> None:
    model, params, _ = load_trained(args.checkpoint)
    support = load_csv(args.support)
    key = (args.region, args.attribute)
    if key not in support.tasks:
        raise UsageError(f"{args.support}: no rows for region {args.region!r}, attribute {args.attribute!r}")
    records = read_records(args.records)
    if key not in records:
        raise DatasetError(f"{args.records}: no normalization record for {key}")
    task = support[key]
    aux = tuple(float(v) for v in _csv_list(args.aux)) if args.aux else ()
    grid = GridSpec(args.region, args.resolution, tuple(args.bbox), aux)
    predict_grid(model, params, task.x, task.y, records[key], grid, args.out)
    print(f"wrote {args.resolution ** 2} grid rows to {args.out}")


def _hashes(cfg: ExperimentConfig) -> dict:
    return {s: prepare_split(cfg, s)[1] for s in cfg.seeds}


def _print_summary(report: EvalReport) -> None:
    for metric in ("mse", "loglik"):
        for m, (mean, se, n) in report.summary(metric).items():
            print(f"{metric:<7} {m:<12} {mean:.4f} +- {se:.4f}  (n={n})")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fewshot-gp", description="Few-shot spatial regression experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seeds=True):
        sp.add_argument("--config", help="YAML config file (or a run manifest)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.max_episodes=500")
        if seeds:
            sp.add_argument("--seeds", help="comma-separated experiment seeds")
            sp.add_argument("--methods", help="comma-separated method names")

    g = sub.add_parser("generate-data", help="write a synthetic dataset CSV")
    g.add_argument("--config", help="YAML synthetic-benchmark config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train one method on one seed")
    common(t, seeds=False)
    t.add_argument("--method", default="ours")
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate checkpoints, or train and evaluate every method")
    common(e)
    e.add_argument("--checkpoint", action="append")
    e.add_argument("--seed", type=int)
    e.add_argument("--save-checkpoints", action="store_true")
    e.add_argument("--out-dir", required=True)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="target MSE against support size or training-set size")
    common(s)
    s.add_argument("--axis", choices=SWEEP_AXES, required=True)
    s.add_argument("--values", type=_int_list, required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="train and evaluate the ablation variants")
    common(a)
    a.add_argument("--variants", help=f"comma-separated subset of {','.join(ABLATIONS)}")
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_ablate)

    q = sub.add_parser("predict-grid", help="export predictions over a lattice as CSV")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--support", required=True, help="dataset CSV holding the support observations")
    q.add_argument("--records", required=True, help="normalization-record JSON sidecar")
    q.add_argument("--region", required=True)
    q.add_argument("--attribute", required=True)
    q.add_argument("--resolution", type=int, default=32)
    q.add_argument("--bbox", type=float, nargs=4, default=(-1.7, 1.7, -1.7, 1.7),
                   metavar=("X1LO", "X1HI", "X2LO", "X2HI"), help="box in normalized coordinates")
    q.add_argument("--aux", help="constant auxiliary features, comma-separated")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_predict_grid)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (TrainingAborted, ad.CholeskyError, ad.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, DatasetError, ValueError, KeyError, FileNotFoundError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
