"""Multi-seed experiment orchestration: data, GAN, predictors per lambda, evaluation
and reports, with a manifest of every artifact written."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .data import (
    SCM_KINDS,
    Dataset,
    RoleSchema,
    ScmConfig,
    builtin_schema,
    ingest_csv,
    load_dataset,
    save_dataset,
    simulate,
    split,
)
from .errors import ValidationError
from .gan import GanBundle, GanTrainConfig, discriminator_accuracy, train_gan
from .metrics import (
    GAMMA_GRID,
    MetricsReport,
    aggregate,
    bound_audit,
    cf_metric,
    confusion_metrics,
    density_export,
    normalized_mse,
    reports_frame,
    total_variation,
    utility_table,
)
from .predictor import PredictorBundle, PredictorTrainConfig, gan_counterfactuals, train_predictor

log = logging.getLogger(__name__)

REAL_DATASETS = ("adult", "compas")
DATA_DIR_ENV = "GCFN_DATA_DIR"
# decile at or above which the COMPAS tool labels a defendant high risk
COMPAS_SCORE_THRESHOLD = 5


@dataclass
class ExperimentConfig:
    dataset: str = "synthetic-linear"
    schema: str | None = None
    n_samples: int | None = None
    scm_coefficients: dict = field(default_factory=dict)
    test_fraction: float = 0.2
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    lambda_grid: list = field(default_factory=lambda: [0.0, 0.5])
    gamma_grid: list = field(default_factory=lambda: list(GAMMA_GRID))
    gan_alpha: float = 1.0
    gan_epochs: int = 300
    gan_batch_size: int = 256
    gan_lr: float = 0.0005
    gan_k_alt: int = 1
    gan_hidden_dim: int = 64
    pred_epochs: int = 30
    pred_batch_size: int = 256
    pred_lr: float = 0.005
    pred_hidden_dim: int = 64
    pred_spectral_norm: bool = False
    pred_cache_counterfactuals: bool = True
    density_bins: int = 20
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("seeds must be nonempty")
        if not self.lambda_grid or not self.gamma_grid:
            raise ValidationError("lambda_grid and gamma_grid must be nonempty")
        if any(v < 0 for v in self.lambda_grid) or any(v < 0 for v in self.gamma_grid):
            raise ValidationError("lambda and gamma values must be >= 0")
        self.seeds = [int(s) for s in self.seeds]
        self.lambda_grid = [float(v) for v in self.lambda_grid]
        self.gamma_grid = [float(v) for v in self.gamma_grid]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def gan_config(self, seed):
        return GanTrainConfig(
            alpha=self.gan_alpha,
            epochs=self.gan_epochs,
            batch_size=self.gan_batch_size,
            lr=self.gan_lr,
            k_alt=self.gan_k_alt,
            seed=seed,
            hidden_dim=self.gan_hidden_dim,
        )

    def predictor_config(self, seed, lam):
        return PredictorTrainConfig(
            lam=lam,
            epochs=self.pred_epochs,
            batch_size=self.pred_batch_size,
            lr=self.pred_lr,
            seed=seed,
            hidden_dim=self.pred_hidden_dim,
            spectral_norm=self.pred_spectral_norm,
            cache_counterfactuals=self.pred_cache_counterfactuals,
        )


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    status: str = "ok"
    error: dict | None = None
    artifacts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    software: dict = field(default_factory=dict)

    def add(self, name, path):
        self.artifacts[name] = {"path": str(path), "sha256": file_sha256(path)}

    def to_dict(self):
        return dataclasses.asdict(self)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def software_versions():
    return {"gcfn": __version__, "numpy": np.__version__, "pandas": pd.__version__, "python": platform.python_version()}


def verify_manifest(manifest: dict):
    """Names of artifacts that are missing or whose hash changed."""
    bad = []
    for name, art in manifest["artifacts"].items():
        p = Path(art["path"])
        if not p.exists() or file_sha256(p) != art["sha256"]:
            bad.append(name)
    return bad


# --------------------------------------------------------------------------
# data resolution


def data_dir():
    return Path(os.environ.get(DATA_DIR_ENV, "data/raw"))


def resolve_schema(spec):
    if spec is None:
        return None
    if isinstance(spec, RoleSchema):
        return spec
    if str(spec).endswith(".json"):
        return RoleSchema.from_json(spec)
    return builtin_schema(spec)


def load_data(dataset: str, seed=0, schema=None, n_samples=None, scm_coefficients=None) -> Dataset:
    """Simulate a named SCM, read a built-in real dataset, or ingest a CSV path.

    A CSV written by :func:`~gcfn.data.save_dataset` (with its sidecar) is loaded as-is.
    """
    if dataset in SCM_KINDS:
        return simulate(ScmConfig(kind=dataset, seed=seed, n_samples=n_samples, coefficients=dict(scm_coefficients or {})))
    if dataset in REAL_DATASETS:
        path = data_dir() / f"{dataset}.csv"
        if not path.exists():
            raise ValidationError(
                f"{path} not found; run scripts/fetch_data.py or set {DATA_DIR_ENV} to the folder holding {dataset}.csv"
            )
        return ingest_csv(path, resolve_schema(schema) or builtin_schema(dataset))
    path = Path(dataset)
    if not path.exists():
        raise ValidationError(f"unknown dataset {dataset!r}: not a simulator kind, built-in name or existing file")
    if Path(str(path) + ".meta.json").exists():
        return load_dataset(path)
    schema = resolve_schema(schema)
    if schema is None:
        raise ValidationError("a schema (built-in name or JSON path) is required to ingest a raw CSV")
    return ingest_csv(path, schema)


# --------------------------------------------------------------------------
# evaluation


def score_baseline(ds: Dataset):
    """Confusion rates of the COMPAS decile score when the dataset carries it."""
    if "decile_score" not in ds.extras:
        return None
    score = np.asarray(ds.extras["decile_score"], dtype=float)
    pred = (score >= COMPAS_SCORE_THRESHOLD).astype(int)
    return confusion_metrics(ds.Y, pred, ds.A)


def evaluate(pred: PredictorBundle, gan: GanBundle, test: Dataset, gamma_grid=GAMMA_GRID, density_bins=20, seed=None,
             dataset=None):
    """Score a trained predictor on held-out data.

    Returns (MetricsReport, density table). Utility uses the ground-truth CF
    when the data has counterfactual mediators and the generated CF otherwise.
    """
    h = pred.predictor
    x, m = pred.features(test)
    p = h.predict(x, m)
    y_hat = (p >= 0.5).astype(int)
    acc = float(np.mean(y_hat == test.Y))
    m_hat = gan_counterfactuals(gan, test, pred.standardization)
    cf_gen = cf_metric(h, x, m, m_hat)
    cf_true = nmse = audit = None
    if test.M_cf is not None:
        m_cf = pred.to_input_scale(test.M_cf)
        cf_true = cf_metric(h, x, m, m_cf)
        gen_err = float(np.mean(np.sum((m_cf - m_hat) ** 2, axis=1)))
        audit = bound_audit(cf_true, pred.lipschitz_cert, gen_err, cf_gen)
        nmse = normalized_mse(test.M, test.M_cf, gan.counterfactual_raw(test))
    confusion = confusion_metrics(test.Y, y_hat, test.A)
    ref = score_baseline(test)
    if ref is not None:
        confusion["score:overall"] = ref["overall"]
        confusion["score:a=0"] = ref["a=0"]
        confusion["score:a=1"] = ref["a=1"]
    dens, empty = density_export(p, np.where(test.A == 1, "a=1", "a=0"), density_bins, groups=["a=0", "a=1"])
    tv = None if empty else total_variation(dens, "a=0", "a=1")
    report = MetricsReport(
        accuracy=acc,
        cf_gen=cf_gen,
        cf_true=cf_true,
        utility=utility_table(acc, cf_true if cf_true is not None else cf_gen, gamma_grid),
        nmse=nmse,
        confusion=confusion,
        bound_audit=audit,
        lam=pred.config.lam,
        seed=seed,
        dataset=dataset,
        tv_distance=tv,
        disc_accuracy=discriminator_accuracy(gan, test),
    )
    return report, dens


# --------------------------------------------------------------------------
# runs


def lam_tag(lam):
    return f"{lam:g}".replace(".", "p")


def run_seed(cfg: ExperimentConfig, seed: int, out: Path):
    """One seed end to end. Returns (manifest, reports)."""
    manifest = RunManifest(config_hash=cfg.hash(), seed=seed, software=software_versions())
    seed_dir = out / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    t0 = time.perf_counter()
    ds = load_data(cfg.dataset, seed, cfg.schema, cfg.n_samples, cfg.scm_coefficients)
    train, test = split(ds, cfg.test_fraction, seed)
    manifest.add("test_data", save_dataset(test, seed_dir / "test.csv"))
    manifest.timings["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    gan = train_gan(train, cfg.gan_config(seed))
    manifest.timings["gan"] = time.perf_counter() - t0
    gan_path = seed_dir / "gan.npz"
    gan.save(gan_path)
    manifest.add("gan", gan_path)
    hist_path = seed_dir / "gan_loss.csv"
    pd.DataFrame(gan.loss_history, columns=["L_adv", "L_f"]).rename_axis("epoch").to_csv(hist_path)
    manifest.add("gan_loss", hist_path)

    for lam in cfg.lambda_grid:
        tag = lam_tag(lam)
        t0 = time.perf_counter()
        pb = train_predictor(train, gan, cfg.predictor_config(seed, lam))
        manifest.timings[f"predictor_{tag}"] = time.perf_counter() - t0
        p_path = seed_dir / f"predictor_lam{tag}.npz"
        pb.save(p_path)
        manifest.add(f"predictor_lam{tag}", p_path)
        report, dens = evaluate(pb, gan, test, cfg.gamma_grid, cfg.density_bins, seed=seed, dataset=cfg.dataset)
        reports.append(report)
        r_path = seed_dir / f"metrics_lam{tag}.json"
        r_path.write_text(report.to_json(indent=2, sort_keys=True))
        manifest.add(f"metrics_lam{tag}", r_path)
        d_path = seed_dir / f"density_lam{tag}.csv"
        dens.to_csv(d_path, index=False)
        manifest.add(f"density_lam{tag}", d_path)
    return manifest, reports


def run_experiment(cfg: ExperimentConfig, progress=None):
    """Run every seed; a failing seed is recorded and the rest continue.

    Writes config.json, reports.csv (one row per seed and lambda), summary.csv
    (mean/std per lambda) and manifest.json under ``cfg.output_dir``.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    manifests, reports = [], []
    for seed in cfg.seeds:
        try:
            man, reps = run_seed(cfg, seed, out)
        except Exception as exc:  # a failed seed must not stop the others
            log.error("seed %d failed: %s: %s", seed, type(exc).__name__, exc)
            man = RunManifest(config_hash=cfg.hash(), seed=seed, status="failed",
                              error={"type": type(exc).__name__, "message": str(exc)}, software=software_versions())
            reps = []
        manifests.append(man)
        reports += reps
        if progress is not None:
            progress(seed, man)
    write_reports(out, reports, manifests)
    return manifests


def write_reports(out: Path, reports, manifests):
    if reports:
        frame = reports_frame(reports)
        frame.to_csv(out / "reports.csv", index=False, float_format="%.17g")
        aggregate(frame).to_csv(out / "summary.csv", index=False, float_format="%.17g")
        for m in manifests:
            m.add("reports", out / "reports.csv")
            m.add("summary", out / "summary.csv")
    with open(out / "manifest.json", "w") as fh:
        json.dump([m.to_dict() for m in manifests], fh, indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# baseline comparison

COMPARE_FIELDS = ("accuracy", "cf_true", "cf_gen", "utility:mean")


def compare_baseline(base: pd.DataFrame, treat: pd.DataFrame, fields=None):
    """Per-seed deltas (treatment minus baseline) of accuracy, CF and utility.

    Both frames hold one row per seed in :meth:`MetricsReport.flat` layout.
    """
    fields = list(fields or [c for c in base.columns if c in COMPARE_FIELDS or c.startswith("utility:")])
    if sorted(base.seed) != sorted(treat.seed) or base.seed.duplicated().any() or treat.seed.duplicated().any():
        raise ValidationError(f"seed sets differ: {sorted(base.seed)} vs {sorted(treat.seed)}")
    b = base.set_index("seed").sort_index()
    t = treat.set_index("seed").sort_index()
    fields = [f for f in fields if f in b.columns and f in t.columns and b[f].notna().all()]
    delta = t[fields].astype(float) - b[fields].astype(float)
    delta.columns = [f"delta:{f}" for f in fields]
    delta.insert(0, "lambda_base", b["lambda"])
    delta.insert(1, "lambda", t["lambda"])
    return delta.reset_index()


def compare_lambdas(frame: pd.DataFrame, base_lambda=0.0):
    """Compare every lambda in ``frame`` against ``base_lambda``."""
    if not (frame["lambda"] == base_lambda).any():
        raise ValidationError(f"no rows with lambda={base_lambda} to compare against")
    base = frame[frame["lambda"] == base_lambda]
    parts = [compare_baseline(base, frame[frame["lambda"] == lam]) for lam in sorted(frame["lambda"].unique())]
    return pd.concat(parts, ignore_index=True)
