"""Datasets: column-role schemas, SCM simulators with ground-truth counterfactual
mediators, CSV ingestion, train/test splitting and persistence."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ValidationError
from .nn import sigmoid

log = logging.getLogger(__name__)

SIDECAR_SUFFIX = ".meta.json"


@dataclass
class RoleSchema:
    """Assigns each used CSV column a causal role.

    ``categorical_*`` map a column name to its ordered category list; every
    other covariate or mediator is treated as continuous. ``sensitive_map`` and
    ``target_map`` translate raw labels to 0/1 (identity when empty).
    ``extra_cols`` are carried along untouched (e.g. an external risk score).
    """

    covariate_cols: list[str]
    sensitive_col: str
    mediator_cols: list[str]
    target_col: str
    categorical_mediators: dict[str, list] = field(default_factory=dict)
    categorical_covariates: dict[str, list] = field(default_factory=dict)
    sensitive_map: dict = field(default_factory=dict)
    target_map: dict = field(default_factory=dict)
    extra_cols: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.mediator_cols:
            raise ValidationError("schema needs at least one mediator column")
        roles = list(self.covariate_cols) + [self.sensitive_col] + list(self.mediator_cols) + [self.target_col]
        dup = {c for c in roles if roles.count(c) > 1}
        if dup:
            raise ValidationError(f"columns assigned to more than one role: {sorted(dup)}")
        for name, cats in (self.categorical_mediators | self.categorical_covariates).items():
            if len(cats) < 2 or len(set(map(str, cats))) != len(cats):
                raise ValidationError(f"categorical column {name!r} needs >= 2 distinct categories")
        bad = set(self.categorical_mediators) - set(self.mediator_cols)
        bad |= set(self.categorical_covariates) - set(self.covariate_cols)
        if bad:
            raise ValidationError(f"categorical declarations for columns without that role: {sorted(bad)}")
        for name, mapping in (("sensitive", self.sensitive_map), ("target", self.target_map)):
            if mapping and set(mapping.values()) - {0, 1}:
                raise ValidationError(f"{name}_map must map to 0/1")

    @property
    def role_cols(self):
        return list(self.covariate_cols) + [self.sensitive_col] + list(self.mediator_cols) + [self.target_col]

    def blocks(self, role):
        """Column layout of the encoded matrix: list of (name, start, stop, categories|None)."""
        cols = self.covariate_cols if role == "covariate" else self.mediator_cols
        cats = self.categorical_covariates if role == "covariate" else self.categorical_mediators
        out, pos = [], 0
        for c in cols:
            width = len(cats[c]) if c in cats else 1
            out.append((c, pos, pos + width, list(cats[c]) if c in cats else None))
            pos += width
        return out

    def width(self, role):
        b = self.blocks(role)
        return b[-1][2] if b else 0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def builtin_schema(name):
    """Role schemas shipped with the package (``adult``, ``compas``)."""
    text = resources.files("gcfn.schemas").joinpath(f"{name}.json").read_text()
    return RoleSchema.from_dict(json.loads(text))


@dataclass
class Standardization:
    """Per-column affine maps; one-hot columns keep mean 0 / scale 1."""

    x_mean: np.ndarray
    x_scale: np.ndarray
    m_mean: np.ndarray
    m_scale: np.ndarray

    @classmethod
    def fit(cls, schema, X, M):
        return cls(*_fit_cols(schema.blocks("covariate"), X), *_fit_cols(schema.blocks("mediator"), M))

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


def _fit_cols(blocks, A):
    width = blocks[-1][2] if blocks else 0
    mean, scale = np.zeros(width), np.ones(width)
    for _, start, stop, cats in blocks:
        if cats is None:
            col = A[:, start]
            mean[start] = col.mean()
            sd = col.std()
            scale[start] = sd if sd > 0 else 1.0
    return mean, scale


@dataclass
class Dataset:
    """Raw (unstandardized) data plus the standardization used to feed networks.

    ``X`` and ``M`` hold encoded values: continuous columns as-is, categorical
    columns one-hot. ``M_cf`` (ground-truth counterfactual mediators) and
    ``noise`` exist only for simulated data.
    """

    schema: RoleSchema
    X: np.ndarray
    A: np.ndarray
    M: np.ndarray
    Y: np.ndarray
    M_cf: np.ndarray | None = None
    noise: dict | None = None
    standardization: Standardization | None = None
    extras: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.A), -1)
        self.M = np.asarray(self.M, dtype=float).reshape(len(self.A), -1)
        self.A = np.asarray(self.A, dtype=int)
        self.Y = np.asarray(self.Y, dtype=int)
        n = len(self.A)
        for name, arr in (("X", self.X), ("M", self.M), ("Y", self.Y), ("M_cf", self.M_cf)):
            if arr is not None and len(arr) != n:
                raise ValidationError(f"{name} has {len(arr)} rows, expected {n}")
        for name, arr in (("A", self.A), ("Y", self.Y)):
            if not np.all((arr == 0) | (arr == 1)):
                raise ValidationError(f"{name} must be binary 0/1")
        if self.M_cf is not None:
            self.M_cf = np.asarray(self.M_cf, dtype=float).reshape(self.M.shape)
        if self.standardization is None:
            self.standardization = Standardization.fit(self.schema, self.X, self.M)

    @property
    def rows(self):
        return len(self.A)

    def x_std(self, X=None):
        s = self.standardization
        return ((self.X if X is None else X) - s.x_mean) / s.x_scale

    def m_std(self, M=None):
        s = self.standardization
        return ((self.M if M is None else M) - s.m_mean) / s.m_scale

    def m_raw(self, M_std):
        s = self.standardization
        return np.asarray(M_std) * s.m_scale + s.m_mean

    def x_raw(self, X_std):
        s = self.standardization
        return np.asarray(X_std) * s.x_scale + s.x_mean

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            schema=self.schema,
            X=self.X[idx],
            A=self.A[idx],
            M=self.M[idx],
            Y=self.Y[idx],
            M_cf=None if self.M_cf is None else self.M_cf[idx],
            noise=None if self.noise is None else {k: v[idx] for k, v in self.noise.items()},
            standardization=self.standardization,
            extras={k: v[idx] for k, v in self.extras.items()},
            meta=dict(self.meta),
        )


# --------------------------------------------------------------------------
# simulators

SCM_KINDS = ("synthetic-linear", "semi-sigmoid", "semi-sin")

DEFAULT_COEFFICIENTS = {
    "synthetic-linear": {"beta1": 1.0, "beta2": 1.0, "beta3": 1.0, "beta5": 1.0, "beta6": 1.0},
    "semi-sigmoid": {"w_x1": 0.5, "w_x2": 0.5, "w_a": 1.0, "w_m1": 2.0, "w_m2": 0.5},
    "semi-sin": {"w_x1": 0.5, "w_x2": 0.5, "w_a": 1.0, "w_m1": 2.0, "w_m2": 0.5},
}
DEFAULT_NOISE_SDS = {
    "synthetic-linear": {"x": 1.0, "a": 0.1, "m": 0.1, "y": 0.1},
    "semi-sigmoid": {"m1": 0.1, "m2": 0.1, "y": 0.1},
    "semi-sin": {"m1": 0.1, "m2": 0.1, "y": 0.1},
}
DEFAULT_N_SAMPLES = {"synthetic-linear": 10_000, "semi-sigmoid": 101_570, "semi-sin": 101_570}


@dataclass
class ScmConfig:
    kind: str = "synthetic-linear"
    coefficients: dict = field(default_factory=dict)
    noise_sds: dict = field(default_factory=dict)
    n_samples: int | None = None
    seed: int = 0
    # semi-synthetic only: probabilities of the binary confounders and of A
    p_x1: float = 0.5
    p_x2: float = 0.5
    p_a: float = 0.5
    confounder_csv: str | None = None

    def __post_init__(self):
        if self.kind not in SCM_KINDS:
            raise ValidationError(f"unknown SCM kind {self.kind!r}; expected one of {SCM_KINDS}")
        self.coefficients = {**DEFAULT_COEFFICIENTS[self.kind], **self.coefficients}
        self.noise_sds = {**DEFAULT_NOISE_SDS[self.kind], **self.noise_sds}
        if self.n_samples is None:
            self.n_samples = DEFAULT_N_SAMPLES[self.kind]
        if self.n_samples <= 0:
            raise ValidationError("n_samples must be positive")
        if any(sd <= 0 for sd in self.noise_sds.values()):
            raise ValidationError("noise standard deviations must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)


SYNTHETIC_SCHEMA = dict(covariate_cols=["x"], sensitive_col="a", mediator_cols=["m"], target_col="y")
SEMI_SCHEMA = dict(
    covariate_cols=["resident", "race"], sensitive_col="gender", mediator_cols=["gpa", "lsat"], target_col="admit"
)


def synthetic_mediator(x, a, u_m, coef):
    return coef["beta2"] * x + coef["beta3"] * a + u_m


def simulate_synthetic(cfg: ScmConfig) -> Dataset:
    """Linear-Gaussian SCM: X -> A, (X, A) -> M, (X, M) -> Y."""
    if cfg.kind != "synthetic-linear":
        raise ValidationError(f"simulate_synthetic needs kind 'synthetic-linear', got {cfg.kind!r}")
    c, sd, n = cfg.coefficients, cfg.noise_sds, cfg.n_samples
    rng = np.random.default_rng(cfg.seed)
    u_x = rng.normal(0.0, sd["x"], n)
    u_a = rng.normal(0.0, sd["a"], n)
    u_m = rng.normal(0.0, sd["m"], n)
    u_y = rng.normal(0.0, sd["y"], n)
    v_a = rng.uniform(size=n)
    v_y = rng.uniform(size=n)

    x = u_x
    a = (v_a < sigmoid(c["beta1"] * x + u_a)).astype(int)
    m = synthetic_mediator(x, a, u_m, c)
    m_cf = synthetic_mediator(x, 1 - a, u_m, c)
    y = (v_y < sigmoid(c["beta5"] * x + c["beta6"] * m + u_y)).astype(int)
    return Dataset(
        schema=RoleSchema(**SYNTHETIC_SCHEMA),
        X=x[:, None],
        A=a,
        M=m[:, None],
        Y=y,
        M_cf=m_cf[:, None],
        noise={"U_X": u_x, "U_A": u_a, "U_M": u_m, "U_Y": u_y, "V_A": v_a, "V_Y": v_y},
        meta={"scm": cfg.to_dict(), "seed": cfg.seed},
    )


def semi_mediators(kind, x1, x2, a, u_m1, u_m2, coef):
    """Structural equations for (GPA, LSAT) in the semi-synthetic SCMs."""
    w = coef
    base = w["w_x1"] * x1 + w["w_x2"] * x2
    if kind == "semi-sigmoid":
        m1 = w["w_m1"] * sigmoid(w["w_a"] * a + base + u_m1)
        m2 = w["w_m2"] + w["w_m1"] * sigmoid(w["w_a"] * a + base + u_m2)
    elif kind == "semi-sin":
        m1 = w["w_a"] * a - np.sin(np.pi * (base + u_m1))
        m2 = w["w_a"] * a - np.sin(np.pi * (base + u_m2))
    else:
        raise ValidationError(f"unknown semi-synthetic kind {kind!r}")
    return np.column_stack([m1, m2])


def _load_confounders(path, n, rng):
    df = pd.read_csv(path)
    missing = {"resident", "race"} - set(df.columns)
    if missing:
        raise ValidationError(f"confounder CSV {path} lacks columns {sorted(missing)}")
    idx = rng.integers(0, len(df), n)
    return df["resident"].to_numpy(float)[idx], df["race"].to_numpy(float)[idx]


def simulate_semi(cfg: ScmConfig) -> Dataset:
    """Law-school style SCM with two mediators built by a sigmoid or sin mechanism."""
    if cfg.kind not in ("semi-sigmoid", "semi-sin"):
        raise ValidationError(f"simulate_semi needs a semi-* kind, got {cfg.kind!r}")
    w, sd, n = cfg.coefficients, cfg.noise_sds, cfg.n_samples
    rng = np.random.default_rng(cfg.seed)
    if cfg.confounder_csv:
        x1, x2 = _load_confounders(cfg.confounder_csv, n, rng)
    else:
        x1 = (rng.uniform(size=n) < cfg.p_x1).astype(float)
        x2 = (rng.uniform(size=n) < cfg.p_x2).astype(float)
    a = (rng.uniform(size=n) < cfg.p_a).astype(int)
    u_m1 = rng.normal(0.0, sd["m1"], n)
    u_m2 = rng.normal(0.0, sd["m2"], n)
    u_y = rng.normal(0.0, sd["y"], n)
    v_y = rng.uniform(size=n)

    m = semi_mediators(cfg.kind, x1, x2, a, u_m1, u_m2, w)
    m_cf = semi_mediators(cfg.kind, x1, x2, 1 - a, u_m1, u_m2, w)
    logit = w["w_m1"] * m[:, 0] + w["w_m2"] * m[:, 1] + w["w_x1"] * x1 + w["w_x2"] * x2 + u_y
    y = (v_y < sigmoid(logit)).astype(int)
    return Dataset(
        schema=RoleSchema(**SEMI_SCHEMA),
        X=np.column_stack([x1, x2]),
        A=a,
        M=m,
        Y=y,
        M_cf=m_cf,
        noise={"U_M1": u_m1, "U_M2": u_m2, "U_Y": u_y, "V_Y": v_y},
        meta={"scm": cfg.to_dict(), "seed": cfg.seed},
    )


def simulate(cfg: ScmConfig) -> Dataset:
    return simulate_synthetic(cfg) if cfg.kind == "synthetic-linear" else simulate_semi(cfg)


def refactual_mediators(ds: Dataset, a=None):
    """Re-evaluate the mediator equation of a simulated dataset on its stored noise.

    ``a`` defaults to the observed attribute (reproducing ``M``); pass ``1 - A``
    for the counterfactual world.
    """
    scm = ds.meta.get("scm")
    if scm is None or ds.noise is None:
        raise ValidationError("dataset was not produced by a simulator")
    a = ds.A if a is None else np.asarray(a)
    coef = scm["coefficients"]
    if scm["kind"] == "synthetic-linear":
        return synthetic_mediator(ds.X[:, 0], a, ds.noise["U_M"], coef)[:, None]
    return semi_mediators(scm["kind"], ds.X[:, 0], ds.X[:, 1], a, ds.noise["U_M1"], ds.noise["U_M2"], coef)


def overlap_by_decile(x, a, n_bins=10):
    """Counts of each attribute value inside equal-frequency bins of a scalar covariate."""
    x = np.asarray(x, dtype=float).ravel()
    edges = np.quantile(x, np.linspace(0, 1, n_bins + 1))
    bins = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    counts = np.zeros((n_bins, 2), dtype=int)
    np.add.at(counts, (bins, np.asarray(a, dtype=int)), 1)
    return counts


# --------------------------------------------------------------------------
# CSV ingestion


def _encode_binary(series, mapping, col):
    if mapping:
        vals = series.map(lambda v: mapping.get(str(v), mapping.get(v)) if pd.notna(v) else v)
        bad = series[vals.isna() & series.notna()].unique()
        if len(bad):
            raise ValidationError(f"column {col!r} has values without a 0/1 mapping: {sorted(map(str, bad))[:10]}")
        return vals.to_numpy(dtype=int)
    vals = pd.to_numeric(series, errors="coerce")
    if vals.isna().any() or not vals.isin([0, 1]).all():
        bad = series[~vals.isin([0, 1])].unique()
        raise ValidationError(f"column {col!r} must be binary 0/1, found {sorted(map(str, bad))[:10]}")
    return vals.to_numpy(dtype=int)


def _encode_block(df, blocks):
    width = blocks[-1][2] if blocks else 0
    out = np.zeros((len(df), width))
    for name, start, stop, cats in blocks:
        col = df[name]
        if cats is None:
            vals = pd.to_numeric(col, errors="coerce")
            if vals.isna().any():
                bad = col[vals.isna()].unique()
                raise ValidationError(f"column {name!r} has non-numeric values {sorted(map(str, bad))[:10]}")
            out[:, start] = vals.to_numpy(float)
        else:
            lookup = {str(c): i for i, c in enumerate(cats)}
            codes = col.astype(str).map(lookup)
            if codes.isna().any():
                bad = col[codes.isna()].unique()
                raise ValidationError(f"column {name!r} has categories not in the schema: {sorted(map(str, bad))[:10]}")
            out[np.arange(len(df)), start + codes.to_numpy(int)] = 1.0
    return out


def from_frame(df: pd.DataFrame, schema: RoleSchema, meta=None) -> Dataset:
    """Encode a DataFrame holding every schema column into a :class:`Dataset`."""
    needed = schema.role_cols + list(schema.extra_cols)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise ValidationError(f"missing columns: {missing}")
    n0 = len(df)
    df = df.dropna(subset=schema.role_cols)
    if len(df) < n0:
        log.info("dropped %d rows with missing role values", n0 - len(df))
    df = df.reset_index(drop=True)
    return Dataset(
        schema=schema,
        X=_encode_block(df, schema.blocks("covariate")),
        A=_encode_binary(df[schema.sensitive_col], schema.sensitive_map, schema.sensitive_col),
        M=_encode_block(df, schema.blocks("mediator")),
        Y=_encode_binary(df[schema.target_col], schema.target_map, schema.target_col),
        extras={c: df[c].to_numpy() for c in schema.extra_cols},
        meta={"dropped_rows": n0 - len(df), **(meta or {})},
    )


def encode_features(df: pd.DataFrame, schema: RoleSchema):
    """Encode only the covariate and mediator columns, for scoring unlabeled rows."""
    needed = list(schema.covariate_cols) + list(schema.mediator_cols)
    missing = [c for c in needed if c not in df.columns]
    if missing:
        raise ValidationError(f"missing columns: {missing}")
    if df[needed].isna().any().any():
        raise ValidationError("covariate or mediator values are missing")
    return _encode_block(df, schema.blocks("covariate")), _encode_block(df, schema.blocks("mediator"))


def ingest_csv(path, schema: RoleSchema, options=None) -> Dataset:
    """Read a headered CSV and encode it under ``schema``.

    ``options`` may carry ``na_values`` (extra missing-value markers) and
    ``skipinitialspace``.
    """
    options = dict(options or {})
    df = pd.read_csv(
        path,
        na_values=options.get("na_values", ["?"]),
        skipinitialspace=options.get("skipinitialspace", True),
        dtype=str,
        keep_default_na=True,
    )
    df.columns = [c.strip() for c in df.columns]
    return from_frame(df, schema, meta={"source": str(path)})


# --------------------------------------------------------------------------
# splitting and persistence


def split(ds: Dataset, test_fraction=0.2, seed=0):
    """Random disjoint train/test partition; standardization refit on train."""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError("test_fraction must be in (0, 1)")
    n = ds.rows
    n_test = int(np.floor(n * test_fraction + 0.5))
    if n_test == 0 or n_test == n:
        raise ValidationError(f"split of {n} rows at fraction {test_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    train, test = ds.subset(train_idx), ds.subset(test_idx)
    stats = Standardization.fit(ds.schema, train.X, train.M)
    train.standardization = stats
    test.standardization = stats
    for part, name in ((train, "train"), (test, "test")):
        part.meta["split"] = {"part": name, "test_fraction": test_fraction, "seed": seed}
    return train, test


def _decode_block(A, blocks):
    cols = {}
    for name, start, stop, cats in blocks:
        if cats is None:
            cols[name] = A[:, start]
        else:
            cols[name] = np.asarray(cats, dtype=object)[A[:, start:stop].argmax(axis=1)]
    return cols


def to_frame(ds: Dataset) -> pd.DataFrame:
    s = ds.schema
    cols = {}
    cols.update(_decode_block(ds.X, s.blocks("covariate")))
    cols[s.sensitive_col] = ds.A
    cols.update(_decode_block(ds.M, s.blocks("mediator")))
    cols[s.target_col] = ds.Y
    if ds.M_cf is not None:
        for name, val in _decode_block(ds.M_cf, s.blocks("mediator")).items():
            cols[f"cf:{name}"] = val
    for k, v in (ds.noise or {}).items():
        cols[f"noise:{k}"] = v
    for k, v in ds.extras.items():
        cols[f"extra:{k}"] = v
    return pd.DataFrame(cols)


def save_dataset(ds: Dataset, path):
    """Write ``path`` (CSV) and ``path + '.meta.json'`` (schema, standardization, provenance)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    to_frame(ds).to_csv(path, index=False, float_format="%.17g")
    sidecar = {
        "schema": ds.schema.to_dict(),
        "standardization": ds.standardization.to_dict(),
        "has_counterfactuals": ds.M_cf is not None,
        "noise_cols": sorted(ds.noise) if ds.noise else [],
        "extra_cols": list(ds.extras),
        "meta": ds.meta,
    }
    with open(str(path) + SIDECAR_SUFFIX, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True, default=_json_default)
    return path


def load_dataset(path) -> Dataset:
    with open(str(path) + SIDECAR_SUFFIX) as fh:
        side = json.load(fh)
    schema = RoleSchema.from_dict(side["schema"])
    df = pd.read_csv(
        path,
        dtype={c: str for c in list(schema.categorical_mediators) + list(schema.categorical_covariates)},
        float_precision="round_trip",
    )
    X = _encode_block(df, schema.blocks("covariate"))
    M = _encode_block(df, schema.blocks("mediator"))
    M_cf = None
    if side["has_counterfactuals"]:
        cf = df[[f"cf:{c}" for c in schema.mediator_cols]].copy()
        cf.columns = schema.mediator_cols
        M_cf = _encode_block(cf, schema.blocks("mediator"))
    noise = {k: df[f"noise:{k}"].to_numpy(float) for k in side["noise_cols"]} or None
    return Dataset(
        schema=schema,
        X=X,
        A=df[schema.sensitive_col].to_numpy(int),
        M=M,
        Y=df[schema.target_col].to_numpy(int),
        M_cf=M_cf,
        noise=noise,
        standardization=Standardization.from_dict(side["standardization"]),
        extras={k: df[f"extra:{k}"].to_numpy() for k in side["extra_cols"]},
        meta=side["meta"],
    )


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")
