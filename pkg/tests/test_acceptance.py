"""Acceptance criteria at full protocol: default hyperparameters, 5 seeds.

The whole module takes roughly an hour and a quarter on one CPU core. Each
test prints a one-line verdict that is repeated in the pytest terminal summary.
"""

import json

import numpy as np
import pandas as pd
import pytest

from conftest import real_data_available, record_criterion
from gcfn.data import ScmConfig, load_dataset, simulate
from gcfn.experiment import ExperimentConfig, compare_lambdas, file_sha256, lam_tag, load_data, run_experiment, run_seed, score_baseline
from gcfn.metrics import QuantileOracle, bgm_oracle_counterfactual, normalized_mse, oracle_best_branch
from gcfn.nn import MLP

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2, 3, 4]
GAN_SECONDS_LIMIT = 600


class Runs:
    """Full-protocol experiments, each run once per session on first use."""

    def __init__(self, root):
        self.root = root
        self.cache = {}

    def get(self, name, **cfg):
        if name not in self.cache:
            config = ExperimentConfig(seeds=SEEDS, output_dir=str(self.root / name), **cfg)
            manifests = run_experiment(config)
            failed = {m.seed: m.error for m in manifests if m.status != "ok"}
            assert not failed, f"{name}: failed seeds {failed}"
            frame = pd.read_csv(self.root / name / "reports.csv")
            self.cache[name] = (config, manifests, frame)
        return self.cache[name]


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def synthetic(runs):
    return runs.get("synthetic", dataset="synthetic-linear", lambda_grid=[0.0, 0.5, 1.0, 2.0])


def semi(runs, kind):
    return runs.get(kind, dataset=kind, lambda_grid=[0.5])


def need(name):
    if not real_data_available(name):
        pytest.skip(f"{name}.csv not found; run scripts/fetch_data.py")


def fmt(values):
    return "[" + ", ".join(f"{v:.4f}" for v in values) + "]"


# ---------------------------------------------------------------- 1 and 7


@pytest.mark.parametrize("kind,limit", [("synthetic-linear", 0.05), ("semi-sigmoid", 0.06), ("semi-sin", 0.08)])
def test_c1_generation_quality(runs, kind, limit):
    config, manifests, frame = synthetic(runs) if kind == "synthetic-linear" else semi(runs, kind)
    per_seed = frame.groupby("seed").first()
    cf_err = per_seed["nmse:M_cf,M_hat"].to_numpy()
    copy_err = per_seed["nmse:M,M_hat"].to_numpy()
    gan_time = max(m.timings["gan"] for m in manifests)
    ok = cf_err.mean() <= limit and gan_time <= GAN_SECONDS_LIMIT
    if kind == "synthetic-linear":
        ok = ok and 0.9 <= copy_err.mean() <= 1.1
    detail = (f"{kind} nMSE(M_cf,M_hat) mean {cf_err.mean():.4f} (<= {limit}) per seed {fmt(cf_err)}; "
              f"nMSE(M,M_hat) mean {copy_err.mean():.4f}; slowest GAN {gan_time:.0f}s")
    assert record_criterion(f"1 [{kind}]", ok, detail)


def test_c7_anti_copy(runs):
    """Both criterion-1 statistics at once: close to the true counterfactual and far from the factual."""
    _, _, frame = synthetic(runs)
    per_seed = frame.groupby("seed").first()
    near_cf = per_seed["nmse:M_cf,M_hat"].to_numpy()
    near_one = per_seed["nmse:M,M_hat"].to_numpy()
    ok = bool(near_cf.mean() <= 0.05 and 0.9 <= near_one.mean() <= 1.1)
    detail = (f"mean nMSE(M_cf,M_hat) {near_cf.mean():.4f} with mean nMSE(M,M_hat) {near_one.mean():.4f}; "
              f"per seed {fmt(near_cf)} and {fmt(near_one)}")
    assert record_criterion("7", ok, detail)


# ---------------------------------------------------------------- 2 and 3


def test_c2_lambda_tradeoff(runs):
    _, _, frame = synthetic(runs)
    cf = frame.groupby("lambda")["cf_true"].mean()
    ok = bool(np.all(np.diff(cf.to_numpy()) <= 0) and cf[2.0] <= 0.25 * cf[0.0])
    detail = f"mean CF_true over lambda {list(cf.index)}: {fmt(cf)}; ratio lambda=2/0 {cf[2.0] / cf[0.0]:.3f}"
    assert record_criterion("2", ok, detail)


def test_c3_accuracy_retention(runs):
    _, _, frame = synthetic(runs)
    acc = frame.groupby("lambda")["accuracy"].mean()
    gap = abs(acc[0.5] - acc[0.0])
    assert record_criterion("3", gap <= 0.05, f"accuracy lambda=0 {acc[0.0]:.4f}, lambda=0.5 {acc[0.5]:.4f}, gap {gap:.4f}")


def test_predictor_example_cf_halves_at_default_lambda(runs):
    _, _, frame = synthetic(runs)
    cf = frame.groupby("lambda")["cf_true"].mean()
    ok = cf[0.5] <= 0.5 * cf[0.0]
    assert record_criterion("3 [CF drop at lambda=0.5]", ok, f"CF_true {cf[0.0]:.4f} -> {cf[0.5]:.4f}")


def test_compare_baseline_paired_deltas(runs):
    _, _, frame = synthetic(runs)
    delta = compare_lambdas(frame, 0.0)
    half = delta[delta["lambda"] == 0.5]
    drops = int((half["delta:cf_true"] < 0).sum())
    u_gain = half["delta:utility:1.0"].mean()
    ok = drops >= 4 and u_gain > 0
    detail = f"lambda=0.5 vs 0: CF_true lower in {drops}/{len(half)} seeds; mean gain in U(gamma=1) {u_gain:.4f}"
    assert record_criterion("3 [paired comparison]", ok, detail)


# ---------------------------------------------------------------- 4


def test_c4_bound_audit(runs):
    rows = pd.concat([synthetic(runs)[2], semi(runs, "semi-sigmoid")[2], semi(runs, "semi-sin")[2]], ignore_index=True)
    holds = rows["audit:holds"].astype(bool)
    slack = (rows["audit:rhs"] - rows["audit:cf"]).min()
    detail = f"{int(holds.sum())}/{len(rows)} trained predictors satisfy the bound; smallest slack {slack:.3g}"
    assert record_criterion("4", bool(holds.all()), detail)


# ---------------------------------------------------------------- 5


def test_c5_oracle_equivalence():
    ds = simulate(ScmConfig(kind="synthetic-linear", n_samples=10_000, seed=0))
    oracle = QuantileOracle.fit(ds.X, ds.A, ds.M[:, 0], 10)
    best, cf, _ = oracle_best_branch(oracle, ds.X, ds.A, ds.M[:, 0], ds.M_cf[:, 0])
    nm = normalized_mse(ds.M, ds.M_cf, cf[:, None])["M_cf,M_hat"]
    back = bgm_oracle_counterfactual(oracle, ds.X, 1 - ds.A, cf, best)
    inv = float(np.median(np.abs(back - ds.M[:, 0])))
    ok = nm <= 0.05 and inv <= 1e-3
    assert record_criterion("5", ok, f"oracle nMSE vs analytic {nm:.4f} (branch {best}); involution median {inv:.2e}")


# ---------------------------------------------------------------- 6


def test_c6_gradient_suite():
    from test_gan import test_discriminator_step_ascends_adversarial_objective, test_generator_step_gradient_matches_finite_differences
    from test_nn import LAYER_KINDS, fd_check
    from test_predictor import test_batch_gradients_match_finite_differences

    checked = 0
    for kind in LAYER_KINDS:
        rng = np.random.default_rng(11)
        net = MLP([3, 6, 5, 2], rng=rng, **kind)
        for layer in net.layers:
            layer.bias[:] = rng.normal(scale=0.3, size=layer.bias.shape)
        fd_check(net, rng.standard_normal((5, 3)), rng, rtol=1e-4)
        checked += 1
    for blocks in ([], [(0, 2)]):
        test_generator_step_gradient_matches_finite_differences(blocks)
        checked += 1
    test_discriminator_step_ascends_adversarial_objective()
    for lam in (0.0, 0.5, 3.0):
        test_batch_gradients_match_finite_differences(lam)
        checked += 2
    assert record_criterion("6", True, f"{checked} finite-difference checks at rtol 1e-4 over every layer and loss type")


# ---------------------------------------------------------------- 8


def test_c8a_compas_score_row():
    need("compas")
    ds = load_data("compas")
    black = score_baseline(ds)["a=1"]
    got = (round(black["ACC"], 4), round(black["FPR"], 4))
    ok = got == (0.6644, 0.4198)
    detail = (f"COMPAS decile >= 5 on black defendants (n={black['n']}): ACC {got[0]}, FPR {got[1]}, "
              f"PPV {black['PPV']:.4f}, FNR {black['FNR']:.4f}; target ACC 0.6644, FPR 0.4198")
    assert record_criterion("8a", ok, detail)


def test_c8b_compas_black_fpr(runs):
    need("compas")
    _, _, frame = runs.get("compas", dataset="compas", lambda_grid=[0.5])
    ours = frame["a=1:FPR"].to_numpy()
    score = frame["score:a=1:FPR"].to_numpy()
    wins = int(np.sum(ours < score))
    detail = f"GCFN black FPR {fmt(ours)} vs score FPR {fmt(score)}: lower in {wins}/{len(ours)} seeds"
    assert record_criterion("8b", wins >= 4, detail)


def adult(runs):
    need("adult")
    return runs.get("adult", dataset="adult", lambda_grid=[0.0, 0.5, 1.0])


def test_c8c_adult_histogram_overlap(runs):
    _, _, frame = adult(runs)
    tv = frame.groupby("lambda")["tv_distance"].mean()
    ratio = tv[1.0] / tv[0.0]
    detail = f"mean TV(female, male) lambda=0 {tv[0.0]:.4f}, lambda=1 {tv[1.0]:.4f}, ratio {ratio:.3f} (<= 0.5)"
    assert record_criterion("8c", ratio <= 0.5, detail)


def test_adult_cf_non_increasing_in_lambda(runs):
    _, _, frame = adult(runs)
    cf = frame.groupby("lambda")["cf_gen"].mean()
    ok = bool(np.all(np.diff(cf.to_numpy()) <= 0))
    assert record_criterion("8c [UCI CF over lambda]", ok, f"mean CF_gen over lambda {list(cf.index)}: {fmt(cf)}")


# ---------------------------------------------------------------- 9


def test_c9_rerun_is_bit_exact(runs, tmp_path):
    config, manifests, frame = synthetic(runs)
    original = runs.root / "synthetic"
    manifest = json.loads((original / "manifest.json").read_text())[0]
    seed = manifest["seed"]
    rerun = ExperimentConfig.from_json(original / "config.json")
    run_seed(rerun, seed, tmp_path)
    names = [f"metrics_lam{lam_tag(lam)}.json" for lam in rerun.lambda_grid] + ["gan.npz", "test.csv"]
    same = [file_sha256(tmp_path / f"seed_{seed}" / n) == file_sha256(original / f"seed_{seed}" / n) for n in names]
    recorded = {a["path"]: a["sha256"] for a in manifest["artifacts"].values()}
    matches_manifest = all(recorded[str(original / f"seed_{seed}" / n)] == file_sha256(tmp_path / f"seed_{seed}" / n)
                           for n in names)
    ok = all(same) and matches_manifest
    assert record_criterion("9", ok, f"seed {seed} rerun from saved config: {sum(same)}/{len(names)} artifacts byte-identical")
