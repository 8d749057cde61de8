"""Command-line entry point: ``crossfilter {synth,featurize,train,eval,report}``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
failures while running.  ``CROSSFILTER_CACHE`` overrides the feature cache
directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baselines import CoteachingConfig
from .data import BiQualityDataset, load_manifest
from .dsp import RepKind
from .errors import BadQ, ConfigError, CrossFilterError, EmptyTest
from .experiment import (CACHE_ENV, METHODS, ExperimentConfig, cache_dir, evaluate, featurize_dataset,
                         load_models, load_stores, run_method, save_models)
from .synth import SynthSpec, generate

log = logging.getLogger("crossfilter")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _kinds(text: str) -> list[str]:
    try:
        return [RepKind.parse(k).name for k in text.split(",") if k.strip()]
    except KeyError as exc:
        raise argparse.ArgumentTypeError(f"unknown representation {exc.args[0]!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crossfilter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic bi-quality dataset")
    s.add_argument("--out", required=True, help="output directory")
    d = SynthSpec()
    s.add_argument("--classes", type=int, default=d.J)
    s.add_argument("--n-curated", type=int, default=d.n_curated, help="curated clips per class")
    s.add_argument("--n-noisy", type=int, default=d.n_noisy, help="noisy clips per class")
    s.add_argument("--n-test", type=int, default=d.n_test, help="test clips per class")
    s.add_argument("--noise-ratio", type=float, default=d.noise_ratio)
    s.add_argument("--noise-mode", choices=("symmetric", "confusion"), default=d.noise_mode)
    s.add_argument("--min-seconds", type=float, default=d.min_seconds)
    s.add_argument("--max-seconds", type=float, default=d.max_seconds)
    s.add_argument("--freq-jitter", type=float, default=d.freq_jitter)
    s.add_argument("--multilabel", action="store_true")
    s.add_argument("--seed", type=int, default=d.seed)

    f = sub.add_parser("featurize", help="cache time-frequency representations")
    f.add_argument("--manifest", required=True)
    f.add_argument("--kinds", type=_kinds, default=["LOGMEL", "CQT"])
    f.add_argument("--cache", default="", help=f"cache directory (default: ${CACHE_ENV} or beside the manifest)")

    t = sub.add_parser("train", help="train the two peer models of one method")
    t.add_argument("--config", help="JSON experiment config; flags below override it")
    t.add_argument("--manifest")
    t.add_argument("--method", choices=METHODS)
    t.add_argument("--out")
    t.add_argument("--reps", type=_kinds)
    t.add_argument("--cache")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-peak", type=float)
    t.add_argument("--q", type=float)
    t.add_argument("--lambda", dest="lambda_", type=float)
    t.add_argument("--noisy-loss", choices=("lq", "cce", "mae"))
    t.add_argument("--no-mixup", action="store_true")
    t.add_argument("--no-specaug", action="store_true")
    t.add_argument("--widths", type=lambda s: tuple(int(v) for v in s.split(",")))
    t.add_argument("--epsilon", type=float, help="co-teaching forget rate (coteaching only)")
    t.add_argument("--ramp-epochs", type=int, help="co-teaching ramp length (coteaching only)")
    t.add_argument("--ramp-fraction", type=float, help="fraction of epochs over which the cap grows")
    t.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    t.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)

    e = sub.add_parser("eval", help="evaluate a trained run on the test subset")
    e.add_argument("--run", required=True, help="run directory written by train")
    e.add_argument("--manifest", help="test manifest (default: the run's manifest)")
    e.add_argument("--out", help="report directory (default: RUN/eval)")
    e.add_argument("--metrics", default="", help="comma list of accuracy,map3,lwlrap")
    e.add_argument("--no-plots", action="store_true")

    r = sub.add_parser("report", help="tabulate several evaluated runs")
    r.add_argument("runs", nargs="+", help="run directories")
    r.add_argument("--out", required=True, help="CSV path; a JSON twin is written beside it")
    return p


def cmd_synth(args) -> int:
    spec = SynthSpec(J=args.classes, n_curated=args.n_curated, n_noisy=args.n_noisy, n_test=args.n_test,
                     noise_ratio=args.noise_ratio, noise_mode=args.noise_mode, min_seconds=args.min_seconds,
                     max_seconds=args.max_seconds, freq_jitter=args.freq_jitter, multilabel=args.multilabel,
                     seed=args.seed)
    ds, manifest, truth = generate(spec, args.out)
    Path(args.out, "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {manifest} ({len(ds.curated)} curated, {len(ds.noisy)} noisy, {len(ds.test)} test)")
    return 0


def _default_cache(manifest: str, explicit: str = "") -> Path:
    """``--cache`` flag, else ``$CROSSFILTER_CACHE``, else ``cache/`` beside the manifest."""
    return Path(explicit) if explicit else cache_dir(Path(manifest).parent / "cache")


def cmd_featurize(args) -> int:
    ds = load_manifest(args.manifest)
    root = _default_cache(args.manifest, args.cache)
    counts = featurize_dataset(ds, args.kinds, root)
    print(f"{counts['computed']} computed, {counts['skipped']} up to date in {root}")
    return 0


def _experiment_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.read(args.config)
    else:
        if not args.manifest:
            raise UsageError("train needs --manifest or --config")
        cfg = ExperimentConfig(manifest=args.manifest)
    if args.manifest:
        cfg = replace(cfg, manifest=args.manifest)
    if args.method:
        cfg = replace(cfg, method=args.method)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if args.reps:
        cfg = replace(cfg, reps=tuple(args.reps))
    if args.cache:
        cfg = replace(cfg, cache=args.cache)
    else:
        cfg = replace(cfg, cache=str(cache_dir(cfg.cache or Path(cfg.manifest).parent / "cache")))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    tr = cfg.train
    upd = {k: v for k, v in (("epochs", args.epochs), ("batch_size", args.batch_size),
                             ("lr_peak", args.lr_peak), ("widths", args.widths)) if v is not None}
    if args.no_mixup:
        upd["mixup_alpha"] = 0.0
    if args.no_specaug:
        upd["specaug"] = None
    loss = tr.loss
    for name, val in (("q", args.q), ("lambda_", args.lambda_), ("noisy", args.noisy_loss)):
        if val is not None:
            loss = replace(loss, **{name: val})
    cfg = replace(cfg, train=replace(tr, loss=loss, **upd))
    if args.ramp_fraction is not None:
        cfg = replace(cfg, filter=replace(cfg.filter, ramp_fraction=args.ramp_fraction))
    if args.epsilon is not None or args.ramp_epochs is not None:
        co = cfg.coteaching or CoteachingConfig()
        if args.epsilon is not None:
            co = replace(co, epsilon=args.epsilon)
        if args.ramp_epochs is not None:
            co = replace(co, ramp_epochs=args.ramp_epochs)
        cfg = replace(cfg, coteaching=co)
    cfg.validate()
    return cfg.resolved()


def cmd_train(args) -> int:
    cfg = _experiment_from_args(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.json")
    ds = load_manifest(cfg.manifest)
    featurize_dataset(ds, cfg.reps, cfg.cache)
    stores = load_stores(ds, cfg.reps, cfg.cache, items=list(ds.curated) + list(ds.noisy))
    t0 = time.time()
    res = run_method(cfg.method, ds, stores, cfg.train, cfg.reps, cfg.seed, out, cfg.filter,
                     cfg.coteaching or CoteachingConfig(), resume=args.resume, stop_after=args.stop_after)
    if args.stop_after is not None and args.stop_after < cfg.train.epochs:
        print(f"stopped after epoch {args.stop_after}; checkpoint in {out}")
        return 0
    save_models(out / "models.pt", res.trainers, ds, cfg.method)
    last = res.history[-1] if res.history else {}
    print(f"{cfg.method}: {len(res.history)} epochs in {time.time() - t0:.0f}s; "
          + ", ".join(f"{k}={v:.4g}" for k, v in sorted(last.items()) if k.startswith("loss")))
    return 0


def _plot(history: list[dict], out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    if not history:
        return written
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in sorted({k for row in history for k in row if k.startswith("loss_")}):
        ax.plot(epochs, [row.get(key, np.nan) for row in history], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "loss_vs_epoch.png", dpi=120)
    plt.close(fig)
    written.append(out / "loss_vs_epoch.png")
    if "pseudo_count_1" in history[0]:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for r in (1, 2):
            ax.fill_between(epochs, 0, [row[f"pseudo_count_{r}"] for row in history], alpha=0.35,
                            label=f"pseudo-curated into C^{r}")
        ax.plot(epochs, [row["k"] for row in history], "k--", lw=1, label="per-class cap k")
        ax.set_xlabel("epoch")
        ax.set_ylabel("items")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "pseudo_curated.png", dpi=120)
        plt.close(fig)
        written.append(out / "pseudo_curated.png")
    return written


def _read_history(path: Path) -> list[dict]:
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = ExperimentConfig.read(run / "config.json")
    manifest = args.manifest or cfg.manifest
    ds = load_manifest(manifest)
    models = load_models(run / "models.pt", ds.classes)
    test = list(ds.test)
    if not test:
        raise EmptyTest(f"{manifest} has no test items")
    cache = Path(cfg.cache) if manifest == cfg.manifest else _default_cache(manifest)
    featurize_dataset(BiQualityDataset(ds.classes, test=test), cfg.reps, cache)
    stores = load_stores(ds, cfg.reps, cache, items=test)
    rows, _, reports = evaluate(models, [stores[RepKind.parse(r)] for r in cfg.reps], ds, test, seed=cfg.seed,
                                segment_seconds=cfg.train.segment_seconds)
    wanted = [m for m in args.metrics.split(",") if m] or None
    if wanted:
        unknown = set(wanted) - {"accuracy", "map3", "lwlrap"}
        if unknown:
            raise UsageError(f"unknown metrics {sorted(unknown)}")
        rows = {name: {m: v for m, v in r.items() if m in wanted} for name, r in rows.items()}
    out = Path(args.out) if args.out else run / "eval"
    out.mkdir(parents=True, exist_ok=True)
    summary = {"method": cfg.method, "seed": cfg.seed, "manifest": str(manifest), "n_test": len(test),
               "reps": list(cfg.reps), "rows": rows}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for (name, metric), rep in reports.items():
        if wanted and metric not in wanted:
            continue
        tag = name.replace("+", "plus")
        rep.write_csv(out / f"per_class_{tag}_{metric}.csv")
    if not args.no_plots:
        _plot(_read_history(run / "history.jsonl"), out)
    for name, r in rows.items():
        print(f"{name:6s} " + "  ".join(f"{m}={v:.4f}" for m, v in r.items()))
    return 0


def cmd_report(args) -> int:
    records = []
    for run in args.runs:
        path = Path(run) / "eval" / "metrics.json"
        if not path.exists():
            raise UsageError(f"{run}: no eval/metrics.json; run `crossfilter eval --run {run}` first")
        m = json.loads(path.read_text())
        for model, vals in m["rows"].items():
            for metric, v in vals.items():
                records.append({"run": str(run), "method": m["method"], "seed": m["seed"], "model": model,
                                "metric": metric, "value": v})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, ["run", "method", "seed", "model", "metric", "value"], lineterminator="\n")
        w.writeheader()
        w.writerows(records)
    # mean over seeds per (method, model, metric)
    groups: dict[tuple, list[float]] = {}
    for r in records:
        groups.setdefault((r["method"], r["model"], r["metric"]), []).append(r["value"])
    summary = [{"method": k[0], "model": k[1], "metric": k[2], "mean": float(np.mean(v)),
                "std": float(np.std(v)), "n": len(v)} for k, v in sorted(groups.items())]
    out.with_suffix(".json").write_text(json.dumps({"runs": records, "summary": summary}, indent=2) + "\n")
    for s in summary:
        print(f"{s['method']:12s} {s['model']:6s} {s['metric']:8s} {s['mean']:.4f} ± {s['std']:.4f} (n={s['n']})")
    return 0


COMMANDS = {"synth": cmd_synth, "featurize": cmd_featurize, "train": cmd_train, "eval": cmd_eval,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, BadQ) as exc:
        print(f"crossfilter {args.command}: {exc}", file=sys.stderr)
        return 1
    except CrossFilterError as exc:
        print(f"crossfilter {args.command}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:  # remaining config-object validation
        print(f"crossfilter {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"crossfilter {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
