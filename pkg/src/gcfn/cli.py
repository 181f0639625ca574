"""Command-line entry point. Every failure prints one JSON error record to stderr
and exits nonzero."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from .data import SCM_KINDS, ScmConfig, load_dataset, save_dataset, simulate, split
from .errors import GCFNError, ValidationError
from .experiment import (
    ExperimentConfig,
    compare_baseline,
    compare_lambdas,
    evaluate,
    lam_tag,
    load_data,
    run_experiment,
    verify_manifest,
)
from .gan import GanBundle, train_gan
from .metrics import aggregate
from .predictor import PredictorBundle, train_predictor

log = logging.getLogger("gcfn")


def _config(args):
    d = {}
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
    cfg = ExperimentConfig.from_dict(d)
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if getattr(args, "schema", None):
        cfg.schema = args.schema
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "lam", None) is not None:
        cfg.lambda_grid = [args.lam]
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    ExperimentConfig.from_dict(cfg.to_dict())  # revalidate after overrides
    return cfg


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def cmd_simulate(args):
    cfg = _config(args)
    if cfg.dataset not in SCM_KINDS:
        raise ValidationError(f"simulate needs one of {SCM_KINDS}, got {cfg.dataset!r}")
    ds = simulate(ScmConfig(kind=cfg.dataset, seed=cfg.seeds[0], n_samples=cfg.n_samples, coefficients=cfg.scm_coefficients))
    out = Path(cfg.output_dir)
    path = save_dataset(ds, out / f"{cfg.dataset}.csv")
    _emit({"dataset": str(path), "rows": ds.rows})


def cmd_train_gan(args):
    cfg = _config(args)
    seed = cfg.seeds[0]
    ds = load_data(cfg.dataset, seed, cfg.schema, cfg.n_samples, cfg.scm_coefficients)
    train, test = split(ds, cfg.test_fraction, seed)
    out = Path(cfg.output_dir)
    save_dataset(train, out / "train.csv")
    save_dataset(test, out / "test.csv")
    gan = train_gan(train, cfg.gan_config(seed), progress=_progress("gan"))
    gan.save(out / "gan.npz")
    pd.DataFrame(gan.loss_history, columns=["L_adv", "L_f"]).rename_axis("epoch").to_csv(out / "gan_loss.csv")
    _emit({"gan": str(out / "gan.npz"), "identifier": gan.identifier, "train": str(out / "train.csv"),
           "test": str(out / "test.csv"), "final_loss": gan.loss_history[-1].tolist()})


def cmd_train_predictor(args):
    cfg = _config(args)
    seed = cfg.seeds[0]
    train = load_dataset(args.train)
    gan = GanBundle.load(args.gan)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lam = cfg.lambda_grid[0]
    pb = train_predictor(train, gan, cfg.predictor_config(seed, lam), progress=_progress("predictor"))
    path = out / f"predictor_lam{lam_tag(lam)}.npz"
    pb.save(path)
    pd.DataFrame(pb.loss_history, columns=["L_ce", "R_cm"]).rename_axis("epoch").to_csv(out / f"predictor_lam{lam_tag(lam)}_loss.csv")
    _emit({"predictor": str(path), "lipschitz_cert": pb.lipschitz_cert, "final_loss": pb.loss_history[-1].tolist()})


def cmd_evaluate(args):
    cfg = _config(args)
    pb = PredictorBundle.load(args.predictor)
    gan = GanBundle.load(args.gan)
    test = load_dataset(args.test)
    report, dens = evaluate(pb, gan, test, cfg.gamma_grid, cfg.density_bins, dataset=cfg.dataset)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json(indent=2, sort_keys=True))
    pd.DataFrame([report.flat()]).to_csv(out / "metrics.csv", index=False, float_format="%.17g")
    dens.to_csv(out / "density.csv", index=False)
    if args.predictions:
        frame = pd.read_csv(args.predictions, dtype=str)
        pb.predict_frame(frame).to_csv(out / "predictions.csv", index=False, float_format="%.17g")
    _emit({"accuracy": report.accuracy, "cf_gen": report.cf_gen, "cf_true": report.cf_true, "out": str(out)})


def cmd_sweep(args):
    cfg = _config(args)
    if args.lambdas:
        cfg.lambda_grid = [float(v) for v in args.lambdas.split(",")]
    manifests = run_experiment(cfg, progress=lambda s, m: log.info("seed %d: %s", s, m.status))
    failed = [m.seed for m in manifests if m.status != "ok"]
    _emit({"out": cfg.output_dir, "seeds": cfg.seeds, "failed": failed})
    if len(failed) == len(manifests):
        raise GCFNError(f"all seeds failed; see {cfg.output_dir}/manifest.json")


def cmd_compare(args):
    out = Path(args.out)
    frame = pd.read_csv(out / "reports.csv")
    if args.against:
        treat = pd.read_csv(Path(args.against) / "reports.csv")
        delta = compare_baseline(frame, treat)
    else:
        delta = compare_lambdas(frame, args.base_lambda)
    delta.to_csv(out / "compare.csv", index=False, float_format="%.17g")
    cols = [c for c in delta.columns if c.startswith("delta:")]
    summary = delta.groupby("lambda")[cols].agg(["mean", "std"])
    summary.columns = [f"{c}:{s}" for c, s in summary.columns]
    summary = summary.reset_index()
    summary.to_csv(out / "compare_summary.csv", index=False, float_format="%.17g")
    _emit(summary.to_dict(orient="records"))


def cmd_report(args):
    from .plotting import plot_density, plot_tradeoff, plot_utility

    out = Path(args.out)
    frame = pd.read_csv(out / "reports.csv")
    summary = aggregate(frame)
    summary.to_csv(out / "summary.csv", index=False, float_format="%.17g")
    cf = "cf_true" if frame["cf_true"].notna().all() else "cf_gen"
    tradeoff = summary[["lambda", "accuracy:mean", "accuracy:std", f"{cf}:mean", f"{cf}:std"]]
    tradeoff.to_csv(out / "tradeoff.csv", index=False, float_format="%.17g")
    ucols = [c for c in summary.columns if c.startswith("utility:")]
    summary[["lambda"] + ucols].to_csv(out / "utility.csv", index=False, float_format="%.17g")
    figs = [str(plot_tradeoff(summary, out / "tradeoff.png")), str(plot_utility(summary, out / "utility.png"))]
    seed0 = int(frame["seed"].min())
    tables = {}
    for lam in sorted(frame["lambda"].unique()):
        path = out / f"seed_{seed0}" / f"density_lam{lam_tag(lam)}.csv"
        if path.exists():
            tables[f"lambda={lam:g}"] = pd.read_csv(path)
    if tables:
        figs.append(str(plot_density(tables, out / "density.png")))
    manifest_path = out / "manifest.json"
    stale = []
    if manifest_path.exists():
        for m in json.loads(manifest_path.read_text()):
            stale += [f"seed {m['seed']}: {name}" for name in verify_manifest(m) if name not in ("reports", "summary")]
    _emit({"summary": str(out / "summary.csv"), "figures": figs, "manifest_mismatches": stale})


def _progress(tag):
    def cb(epoch, losses):
        log.debug("%s epoch %d: %s", tag, epoch, np.round(losses, 5).tolist())

    return cb


def build_parser():
    p = argparse.ArgumentParser(prog="gcfn", description="Counterfactually fair classification via generated mediators")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="flat JSON experiment config; flags override its keys")
        sp.add_argument("--dataset", help="simulator kind, built-in real dataset name or CSV path")
        sp.add_argument("--schema", help="built-in schema name or schema JSON path for raw CSVs")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--out", required=out_required)
        return sp

    common(sub.add_parser("simulate", help="write a simulated dataset")).set_defaults(func=cmd_simulate)
    common(sub.add_parser("train-gan", help="split data and train the counterfactual GAN")).set_defaults(func=cmd_train_gan)
    sp = common(sub.add_parser("train-predictor", help="train the regularized classifier"))
    sp.add_argument("--train", required=True, help="training CSV written by train-gan")
    sp.add_argument("--gan", required=True, help="GAN checkpoint")
    sp.set_defaults(func=cmd_train_predictor)
    sp = common(sub.add_parser("evaluate", help="score a predictor on held-out data"))
    sp.add_argument("--predictor", required=True)
    sp.add_argument("--gan", required=True)
    sp.add_argument("--test", required=True, help="test CSV written by train-gan")
    sp.add_argument("--predictions", help="optional CSV of rows to score; written back with a p_hat column")
    sp.set_defaults(func=cmd_evaluate)
    sp = common(sub.add_parser("sweep", help="multi-seed run over a lambda grid"))
    sp.add_argument("--lambdas", help="comma-separated lambda grid")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("compare", help="per-seed deltas against the lambda=0 ablation")
    sp.add_argument("--out", required=True, help="experiment folder holding reports.csv")
    sp.add_argument("--against", help="second experiment folder; compares its rows with --out row by row")
    sp.add_argument("--base-lambda", type=float, default=0.0)
    sp.set_defaults(func=cmd_compare)
    sp = sub.add_parser("report", help="summary tables and figures from an experiment folder")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (GCFNError, OSError, ValueError, KeyError) as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if getattr(exc, "epoch", None) is not None:
            record["epoch"] = exc.epoch
        print(json.dumps(record), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
