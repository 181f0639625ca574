"""Evaluation quantities: counterfactual fairness, utility, normalized mediator
MSEs, confusion rates, prediction densities, the bound audit and the
quantile-matching counterfactual oracle."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import CoverageError, DegenerateNormalizerError, ShapeError, ValidationError

GAMMA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))
# relative slack on the bound comparison, absorbs float rounding only
AUDIT_RTOL = 1e-9


def _predict_fn(h):
    return h.predict if hasattr(h, "predict") else h


def cf_metric(h, X, M, M_ref):
    """Mean squared gap between predictions on ``M`` and on ``M_ref``.

    ``h`` is a :class:`~gcfn.predictor.Predictor` or any callable ``(x, m) -> p``.
    All inputs are on the predictor's input scale.
    """
    if M_ref is None:
        raise ValidationError("reference mediators are missing; ground-truth counterfactuals need simulator data")
    M = np.asarray(M, dtype=float)
    M_ref = np.asarray(M_ref, dtype=float)
    if M.shape != M_ref.shape:
        raise ShapeError(f"mediator shapes differ: {M.shape} vs {M_ref.shape}")
    if np.array_equal(M, M_ref):
        return 0.0
    f = _predict_fn(h)
    d = np.asarray(f(X, M)) - np.asarray(f(X, M_ref))
    return float(np.mean(d**2))


def utility(accuracy, cf, gamma):
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    return accuracy - gamma * cf


def utility_table(accuracy, cf, gammas=GAMMA_GRID):
    return [(float(g), utility(accuracy, cf, g)) for g in gammas]


def _mse(a, b):
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def normalized_mse(M, M_cf, M_hat):
    """Pairwise mediator MSEs divided by MSE(M, M_cf).

    Returns a dict keyed ``"M,M_cf"``, ``"M,M_hat"``, ``"M_cf,M_hat"``.
    """
    M, M_cf, M_hat = (np.asarray(v, dtype=float) for v in (M, M_cf, M_hat))
    if not (M.shape == M_cf.shape == M_hat.shape):
        raise ShapeError(f"shapes differ: {M.shape}, {M_cf.shape}, {M_hat.shape}")
    norm = _mse(M, M_cf)
    if norm == 0:
        raise DegenerateNormalizerError("MSE(M, M_cf) is zero; normalized MSE is undefined")
    return {
        "M,M_cf": 1.0,
        "M,M_hat": _mse(M, M_hat) / norm,
        "M_cf,M_hat": _mse(M_cf, M_hat) / norm,
    }


def _rates(y, p):
    tp = int(np.sum((y == 1) & (p == 1)))
    tn = int(np.sum((y == 0) & (p == 0)))
    fp = int(np.sum((y == 0) & (p == 1)))
    fn = int(np.sum((y == 1) & (p == 0)))
    n = tp + tn + fp + fn

    def ratio(a, b):
        return a / b if b > 0 else None

    return {
        "ACC": ratio(tp + tn, n),
        "PPV": ratio(tp, tp + fp),
        "FPR": ratio(fp, fp + tn),
        "FNR": ratio(fn, fn + tp),
        "n": n,
    }


def confusion_metrics(y_true, y_pred, a=None):
    """ACC, PPV, FPR and FNR overall and per sensitive group.

    Undefined rates (empty denominators) are None. Group keys are ``"a=0"`` and ``"a=1"``.
    """
    y = np.asarray(y_true)
    p = np.asarray(y_pred)
    if y.shape != p.shape or y.ndim != 1:
        raise ShapeError("y_true and y_pred must be 1-d vectors of equal length")
    for name, v in (("y_true", y), ("y_pred", p)):
        if not np.isin(v, [0, 1]).all():
            raise ValidationError(f"{name} must be binary")
    out = {"overall": _rates(y, p)}
    if a is not None:
        a = np.asarray(a)
        if a.shape != y.shape:
            raise ShapeError("a must match y_true in length")
        for g in (0, 1):
            sel = a == g
            out[f"a={g}"] = _rates(y[sel], p[sel]) if sel.any() else None
    return out


# --------------------------------------------------------------------------
# quantile-matching oracle


def _ecdf(sorted_vals, v):
    """Piecewise-linear CDF through plotting positions (i - 0.5) / n."""
    n = len(sorted_vals)
    pos = (np.arange(n) + 0.5) / n
    return np.interp(v, sorted_vals, pos, left=0.5 / n, right=1 - 0.5 / n)


def _ecdf_inv(sorted_vals, q):
    n = len(sorted_vals)
    pos = (np.arange(n) + 0.5) / n
    return np.interp(q, pos, sorted_vals)


@dataclass
class QuantileOracle:
    """Empirical conditional CDFs of a scalar mediator per (X-cell, a).

    Continuous covariate columns are cut into equal-frequency bins; a column
    with at most ``n_bins`` distinct values is used as-is.
    """

    edges: list = field(default_factory=list)
    discrete: list = field(default_factory=list)
    cells: dict = field(default_factory=dict)
    n_bins: int = 10

    @classmethod
    def fit(cls, X, A, m, n_bins=10):
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        m = np.asarray(m, dtype=float)
        if m.ndim != 1:
            if m.shape[1] != 1:
                raise ShapeError("the oracle handles one scalar mediator")
            m = m[:, 0]
        A = np.asarray(A).astype(int)
        oracle = cls(n_bins=int(n_bins))
        for j in range(X.shape[1]):
            uniq = np.unique(X[:, j])
            if len(uniq) <= n_bins:
                oracle.discrete.append(True)
                oracle.edges.append(uniq)
            else:
                oracle.discrete.append(False)
                qs = np.quantile(X[:, j], np.linspace(0, 1, n_bins + 1)[1:-1])
                oracle.edges.append(qs)
        keys = oracle.cell_keys(X)
        for key in set(keys):
            sel = np.array([k == key for k in keys])
            for a in (0, 1):
                vals = np.sort(m[sel & (A == a)])
                if len(vals):
                    oracle.cells[(key, a)] = vals
        return oracle

    def cell_keys(self, X):
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        cols = []
        for j, (disc, e) in enumerate(zip(self.discrete, self.edges)):
            if disc:
                idx = np.searchsorted(e, X[:, j])
                idx = np.where((idx < len(e)) & (e[np.minimum(idx, len(e) - 1)] == X[:, j]), idx, -1)
            else:
                idx = np.searchsorted(e, X[:, j], side="right")
            cols.append(idx)
        return [tuple(int(c) for c in row) for row in np.stack(cols, axis=1)]

    def cell(self, key, a):
        vals = self.cells.get((key, int(a)))
        if vals is None or len(vals) == 0:
            raise CoverageError(f"no training rows in covariate cell {key} with a={a}")
        return vals


def bgm_oracle_counterfactual(oracle: QuantileOracle, x, a, m, branch="+", a_target=None):
    """Quantile-matched counterfactual mediator.

    ``branch="+"`` maps quantile q to q, ``"-"`` maps q to 1 - q.
    ``a_target`` defaults to the flipped attribute.
    """
    if branch not in ("+", "-"):
        raise ValidationError("branch must be '+' or '-'")
    x = np.asarray(x, dtype=float).reshape(len(x), -1) if np.ndim(x) else np.array([[float(x)]])
    a = np.atleast_1d(np.asarray(a)).astype(int)
    m = np.atleast_1d(np.asarray(m, dtype=float)).reshape(len(a))
    a_t = 1 - a if a_target is None else np.broadcast_to(np.asarray(a_target).astype(int), a.shape)
    keys = oracle.cell_keys(x)
    out = np.empty(len(m))
    groups = {}
    for i, (k, ai, ti) in enumerate(zip(keys, a, a_t)):
        groups.setdefault((k, int(ai), int(ti)), []).append(i)
    for (k, ai, ti), rows in groups.items():
        rows = np.asarray(rows)
        q = _ecdf(oracle.cell(k, ai), m[rows])
        if branch == "-":
            q = 1.0 - q
        out[rows] = _ecdf_inv(oracle.cell(k, ti), q)
    return out


def oracle_best_branch(oracle, x, a, m, reference):
    """Both oracle branches; returns (best_branch, counterfactual, errors_by_branch)."""
    res = {b: bgm_oracle_counterfactual(oracle, x, a, m, b) for b in ("+", "-")}
    ref = np.asarray(reference, dtype=float).reshape(-1)
    errs = {b: float(np.mean((v - ref) ** 2)) for b, v in res.items()}
    best = min(errs, key=errs.get)
    return best, res[best], errs


# --------------------------------------------------------------------------
# densities


def density_export(values, group_labels, n_bins=20, groups=None):
    """Per-group normalized histogram over [0, 1].

    Returns (table, empty_groups). ``table`` has columns group, bin_lo, bin_hi, density.
    """
    if n_bins < 2:
        raise ValidationError("n_bins must be >= 2")
    values = np.asarray(values, dtype=float)
    labels = np.asarray(group_labels)
    if values.shape != labels.shape:
        raise ShapeError("values and group_labels must have equal length")
    groups = list(groups) if groups is not None else sorted(np.unique(labels).tolist())
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    rows, empty = [], []
    for g in groups:
        v = values[labels == g]
        if len(v) == 0:
            empty.append(g)
            continue
        dens, _ = np.histogram(np.clip(v, 0.0, 1.0), bins=edges, density=True)
        rows += [(g, edges[i], edges[i + 1], dens[i]) for i in range(n_bins)]
    return pd.DataFrame(rows, columns=["group", "bin_lo", "bin_hi", "density"]), empty


def total_variation(table: pd.DataFrame, g0, g1):
    """Total variation distance between two groups' histograms from :func:`density_export`."""
    t0 = table[table.group == g0]
    t1 = table[table.group == g1]
    if t0.empty or t1.empty:
        raise ValidationError(f"histogram missing for group {g0 if t0.empty else g1}")
    w = (t0.bin_hi - t0.bin_lo).to_numpy()
    return float(0.5 * np.sum(np.abs(t0.density.to_numpy() - t1.density.to_numpy()) * w))


# --------------------------------------------------------------------------
# bound audit and report


def bound_audit(cf, lipschitz, gen_error, r_cm):
    """Compare CF with 2 C^2 E||M_cf - M_hat||^2 + 2 R_cm."""
    rhs = 2.0 * lipschitz**2 * gen_error + 2.0 * r_cm
    return {
        "cf": float(cf),
        "lipschitz": float(lipschitz),
        "gen_error": float(gen_error),
        "r_cm": float(r_cm),
        "rhs": float(rhs),
        "holds": bool(cf <= rhs * (1 + AUDIT_RTOL)),
    }


@dataclass
class MetricsReport:
    accuracy: float
    cf_gen: float
    cf_true: float | None = None
    utility: list = field(default_factory=list)
    nmse: dict | None = None
    confusion: dict | None = None
    bound_audit: dict | None = None
    lam: float | None = None
    seed: int | None = None
    dataset: str | None = None
    tv_distance: float | None = None
    disc_accuracy: float | None = None

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["utility"] = [tuple(u) for u in d.get("utility", [])]
        return cls(**d)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def flat(self):
        """One flat row: nested fields become ``prefix:key`` columns."""
        row = {"dataset": self.dataset, "seed": self.seed, "lambda": self.lam, "accuracy": self.accuracy,
               "cf_gen": self.cf_gen, "cf_true": self.cf_true, "tv_distance": self.tv_distance,
               "disc_accuracy": self.disc_accuracy}
        for g, u in self.utility:
            row[f"utility:{g:.1f}"] = u
        if self.utility:
            row["utility:mean"] = float(np.mean([u for _, u in self.utility]))
        for k, v in (self.nmse or {}).items():
            row[f"nmse:{k}"] = v
        for grp, rates in (self.confusion or {}).items():
            for k, v in (rates or {}).items():
                row[f"{grp}:{k}"] = v
        for k, v in (self.bound_audit or {}).items():
            row[f"audit:{k}"] = v
        return row


def reports_frame(reports):
    return pd.DataFrame([r.flat() for r in reports])


def aggregate(frame: pd.DataFrame, by=("dataset", "lambda")):
    """Mean, std and run count of every numeric column per group."""
    by = [b for b in by if b in frame.columns]
    num = frame.drop(columns=["seed"], errors="ignore")
    keys = [b for b in by]
    cols = [c for c in num.columns if c not in keys and pd.api.types.is_numeric_dtype(num[c])]
    g = num.groupby(keys, dropna=False)[cols]
    out = g.agg(["mean", "std"])
    out.columns = [f"{c}:{s}" for c, s in out.columns]
    out["n_runs"] = g.size()
    return out.reset_index()
