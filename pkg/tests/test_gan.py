import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gcfn.gan as gan_mod
from gcfn.data import Dataset, RoleSchema, ScmConfig, simulate, split
from gcfn.errors import NumericError, ShapeError, TrainingError
from gcfn.gan import (
    Discriminator,
    GanBundle,
    GanTrainConfig,
    Generator,
    adversarial_loss,
    combine_tilde,
    discriminator_accuracy,
    discriminator_step,
    generator_step,
    reconstruction_loss,
    train_gan,
)
from gcfn.metrics import QuantileOracle, normalized_mse, oracle_best_branch
from gcfn.nn import Adam, sigmoid


class Recorder:
    """Stands in for an optimizer and keeps the gradients it is handed."""

    def step(self, grads):
        self.grads = grads


# -------------------------------------------------------------------- generator


def test_zero_final_layer_outputs_bias():
    rng = np.random.default_rng(0)
    gen = Generator(2, 3, rng=rng)
    last = gen.net.layers[-1]
    last.weight[:] = 0.0
    last.bias[:] = np.arange(6.0)
    m0, m1 = gen.generate(rng.standard_normal((4, 2)), np.array([0, 1, 0, 1]), rng.standard_normal((4, 3)))
    np.testing.assert_array_equal(m0, np.tile([0.0, 1.0, 2.0], (4, 1)))
    np.testing.assert_array_equal(m1, np.tile([3.0, 4.0, 5.0], (4, 1)))


def test_generator_output_width_and_shape_errors():
    gen = Generator(1, 2, rng=np.random.default_rng(0))
    out, _ = gen.forward(np.zeros((3, 1)), np.array([0, 1, 1]), np.zeros((3, 2)))
    assert out.shape == (3, 4)
    with pytest.raises(ShapeError):
        gen.generate(np.zeros((3, 2)), np.array([0, 1, 1]), np.zeros((3, 2)))


def test_generator_eval_is_deterministic():
    gen = Generator(1, 1, rng=np.random.default_rng(0))
    x, a, m = np.ones((5, 1)), np.array([0, 1, 0, 1, 1]), np.arange(5.0)[:, None]
    np.testing.assert_array_equal(gen.generate(x, a, m)[0], gen.generate(x, a, m)[0])


def test_categorical_blocks_are_probability_vectors():
    gen = Generator(1, 4, categorical_blocks=[(1, 4)], rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    m0, m1 = gen.generate(rng.standard_normal((6, 1)), rng.integers(0, 2, 6), rng.standard_normal((6, 4)))
    for out in (m0, m1):
        np.testing.assert_allclose(out[:, 1:].sum(axis=1), 1.0)
        assert np.all(out[:, 1:] > 0)


# -------------------------------------------------------------------- combine_tilde


def test_combine_tilde_cases():
    m = np.array([[1.0], [2.0]])
    m0 = np.array([[10.0], [20.0]])
    m1 = np.array([[100.0], [200.0]])
    g0, g1 = combine_tilde(m, np.array([0, 1]), m0, m1)
    np.testing.assert_array_equal(g0, [[1.0], [20.0]])
    np.testing.assert_array_equal(g1, [[100.0], [2.0]])


@given(seed=st.integers(0, 10_000), n=st.integers(1, 20), d=st.integers(1, 4))
def test_combine_tilde_factual_slot_is_observed(seed, n, d):
    rng = np.random.default_rng(seed)
    m, m0, m1 = rng.standard_normal((3, n, d))
    a = rng.integers(0, 2, n)
    g0, g1 = combine_tilde(m, a, m0, m1)
    fact = np.where(a[:, None] == 1, g1, g0)
    cf = np.where(a[:, None] == 1, g0, g1)
    np.testing.assert_array_equal(fact, m)
    np.testing.assert_array_equal(cf, np.where(a[:, None] == 1, m0, m1))


# -------------------------------------------------------------------- losses


class CopyGen:
    def factual(self, x, a, m):
        return np.asarray(m, dtype=float)


class ConstGen:
    def __init__(self, value):
        self.value = value

    def factual(self, x, a, m):
        return np.full(np.shape(m), self.value)


def test_reconstruction_loss_values():
    assert reconstruction_loss(CopyGen(), np.zeros((3, 1)), np.array([0, 1, 0]), np.ones((3, 2))) == 0.0
    assert reconstruction_loss(ConstGen(0.5), np.zeros((1, 1)), np.array([1]), np.array([[1.0]])) == 0.25


def test_reconstruction_loss_of_zero_generator_is_mediator_width():
    ds = simulate(ScmConfig(kind="semi-sin", n_samples=4000, seed=0))
    loss = reconstruction_loss(ConstGen(0.0), ds.x_std(), ds.A, ds.m_std())
    # standardized mediators have unit variance per column
    assert loss == pytest.approx(2.0, rel=1e-9)


def test_adversarial_loss_of_indifferent_discriminator():
    disc = Discriminator(1, 1, rng=np.random.default_rng(0))
    disc.net.layers[-1].weight[:] = 0.0
    disc.net.layers[-1].bias[:] = 0.0
    rng = np.random.default_rng(1)
    tilde = (rng.standard_normal((5, 1)), rng.standard_normal((5, 1)))
    assert adversarial_loss(disc, rng.standard_normal((5, 1)), rng.integers(0, 2, 5), tilde) == pytest.approx(np.log(0.5))


def test_adversarial_loss_of_confident_discriminator():
    disc = Discriminator(1, 1, rng=np.random.default_rng(0))
    disc.net.layers[-1].weight[:] = 0.0
    disc.net.layers[-1].bias[:] = [-40.0, 40.0]
    a = np.ones(3, dtype=int)
    z = np.zeros((3, 1))
    loss = adversarial_loss(disc, z, a, (z, z))
    assert -1e-12 < loss <= 0.0


def test_adversarial_loss_rejects_overflow():
    disc = Discriminator(1, 1, rng=np.random.default_rng(0))
    disc.net.layers[-1].bias[:] = [np.inf, 0.0]
    with pytest.raises(NumericError):
        adversarial_loss(disc, np.zeros((1, 1)), np.array([1]), (np.zeros((1, 1)), np.zeros((1, 1))))


def test_discriminator_cannot_separate_exchangeable_slots():
    """Counterfactual slot filled with another row's factual mediator: nothing to learn."""
    rng = np.random.default_rng(0)
    n = 4000
    x = rng.standard_normal((n, 1))
    a = rng.integers(0, 2, n)
    m = x + rng.normal(0, 1, (n, 1))
    fresh = x + rng.normal(0, 1, (n, 1))
    g0, g1 = combine_tilde(m, a, fresh, fresh)
    disc = Discriminator(1, 1, rng=rng)
    opt = Adam(disc.net, lr=0.0005)
    train, held = np.arange(3000), np.arange(3000, n)
    for _ in range(600):
        idx = rng.choice(train, 256, replace=False)
        logits, cache = disc.logits(x[idx], g0[idx], g1[idx])
        _, p = gan_mod._log_prob_of_slot(logits, a[idx])
        onehot = np.eye(2)[a[idx]]
        grads, _ = disc.net.backward(cache, (p - onehot) / len(idx))
        opt.step(grads)
    loss = adversarial_loss(disc, x[held], a[held], (g0[held], g1[held]))
    acc = np.mean(disc.probs(x[held], g0[held], g1[held]).argmax(axis=1) == a[held])
    assert loss == pytest.approx(-np.log(2), abs=0.03)
    assert 0.45 <= acc <= 0.55


# -------------------------------------------------------------------- step gradients


def small_batch(seed=0, n=6, x_dim=2, m_dim=2):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, x_dim)), np.array([0, 1] * (n // 2)), rng.standard_normal((n, m_dim))


def step_objective(gen, disc, x, a, m, alpha):
    out, _ = gen.forward(x, a, m, mode="train")
    d = gen.m_dim
    g0, g1 = combine_tilde(m, a, out[:, :d], out[:, d:])
    logits, _ = disc.logits(x, g0, g1)
    lp, _ = gan_mod._log_prob_of_slot(logits, a)
    fact = np.where(a[:, None] == 1, out[:, d:], out[:, :d])
    return float(lp.mean()), float(np.mean(np.sum((fact - m) ** 2, axis=1)))


@pytest.mark.parametrize("blocks", [[], [(0, 2)]])
def test_generator_step_gradient_matches_finite_differences(blocks):
    x, a, m = small_batch()
    if blocks:
        m = np.eye(2)[np.array([0, 1, 1, 0, 1, 0])]
    rng = np.random.default_rng(3)
    gen = Generator(2, 2, categorical_blocks=blocks, hidden_dim=5, rng=rng)
    disc = Discriminator(2, 2, hidden_dim=5, rng=rng)
    alpha = 0.7
    rec = Recorder()
    generator_step(gen, disc, rec, x, a, m, alpha)
    h = 1e-6
    for p, g in zip(gen.net.parameters(), rec.grads):
        for idx in list(np.ndindex(p.shape))[:12]:
            old = p[idx]
            p[idx] = old + h
            up = sum(w * v for w, v in zip((1, alpha), step_objective(gen, disc, x, a, m, alpha)))
            p[idx] = old - h
            down = sum(w * v for w, v in zip((1, alpha), step_objective(gen, disc, x, a, m, alpha)))
            p[idx] = old
            fd = (up - down) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_discriminator_step_ascends_adversarial_objective():
    x, a, m = small_batch(1)
    rng = np.random.default_rng(4)
    gen = Generator(2, 2, hidden_dim=5, rng=rng)
    disc = Discriminator(2, 2, hidden_dim=5, rng=rng)
    rec = Recorder()
    discriminator_step(gen, disc, rec, x, a, m)
    h = 1e-6
    for p, g in zip(disc.net.parameters(), rec.grads):
        for idx in list(np.ndindex(p.shape))[:12]:
            old = p[idx]
            p[idx] = old + h
            up = step_objective(gen, disc, x, a, m, 0)[0]
            p[idx] = old - h
            down = step_objective(gen, disc, x, a, m, 0)[0]
            p[idx] = old
            # the optimizer descends, so it receives the negated ascent direction
            assert g[idx] == pytest.approx(-(up - down) / (2 * h), rel=1e-4, abs=1e-7)


# -------------------------------------------------------------------- training


def test_training_is_seed_deterministic(synthetic_split):
    train = synthetic_split[0].subset(np.arange(1000))
    cfg = GanTrainConfig(epochs=3, seed=11)
    a, b = train_gan(train, cfg), train_gan(train, cfg)
    assert a.loss_history.shape == (3, 2)
    np.testing.assert_array_equal(a.loss_history, b.loss_history)
    assert a.identifier == b.identifier


def test_divergence_reports_epoch(synthetic_split, monkeypatch):
    calls = {"n": 0}
    real = gan_mod.generator_step

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] > 10:
            raise NumericError("boom")
        return real(*args)

    monkeypatch.setattr(gan_mod, "generator_step", flaky)
    train = synthetic_split[0].subset(np.arange(1024))  # 4 iterations per epoch
    with pytest.raises(TrainingError) as info:
        train_gan(train, GanTrainConfig(epochs=5))
    assert info.value.epoch == 2


def test_bundle_round_trip(tmp_path, short_gan, synthetic_split):
    test = synthetic_split[1]
    short_gan.save(tmp_path / "g.npz")
    back = GanBundle.load(tmp_path / "g.npz")
    np.testing.assert_array_equal(back.counterfactual_raw(test), short_gan.counterfactual_raw(test))
    np.testing.assert_array_equal(back.loss_history, short_gan.loss_history)
    assert back.identifier == short_gan.identifier
    assert back.g_optimizer.state.step == short_gan.g_optimizer.state.step


def test_short_run_learns_counterfactuals(short_gan, synthetic_split):
    test = synthetic_split[1]
    nm = normalized_mse(test.M, test.M_cf, short_gan.counterfactual_raw(test))
    assert nm["M_cf,M_hat"] <= 0.05
    assert nm["M,M_hat"] >= 0.9


def test_generator_agrees_with_quantile_oracle(short_gan, synthetic_split):
    train, test = synthetic_split
    oracle = QuantileOracle.fit(train.X, train.A, train.M[:, 0], 10)
    m_hat = short_gan.counterfactual_raw(test)[:, 0]
    _, best, _ = oracle_best_branch(oracle, test.X, test.A, test.M[:, 0], m_hat)
    norm = np.mean((test.M[:, 0] - test.M_cf[:, 0]) ** 2)
    assert np.mean((best - m_hat) ** 2) / norm <= 0.05


def test_large_alpha_reproduces_factuals(synthetic_split):
    train, test = synthetic_split
    bundle = train_gan(train, GanTrainConfig(alpha=1e3, epochs=30))
    fact = bundle.generator.factual(test.x_std(), test.A, test.m_std())
    assert np.mean(np.sum((fact - test.m_std()) ** 2, axis=1)) <= 1e-2


def bayes_accuracy_from_x(beta1, sd_a=0.1, n=400_000, seed=123):
    """Accuracy of the best guess of A from X alone under the synthetic SCM."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    p = sigmoid(beta1 * x + rng.normal(0, sd_a, n))
    return float(np.mean(np.maximum(p, 1 - p)))


def test_discriminator_indifferent_without_confounding():
    ds = simulate(ScmConfig(seed=5, coefficients={"beta1": 0.0}))
    train, test = split(ds, 0.2, 5)
    bundle = train_gan(train, GanTrainConfig(epochs=100, seed=5))
    assert 0.45 <= discriminator_accuracy(bundle, test) <= 0.60


def test_discriminator_bounded_by_propensity(short_gan, synthetic_split):
    acc = discriminator_accuracy(short_gan, synthetic_split[1])
    assert 0.45 <= acc <= bayes_accuracy_from_x(1.0) + 0.05


def test_gan_trains_on_categorical_mediators():
    rng = np.random.default_rng(0)
    n = 600
    schema = RoleSchema(covariate_cols=["x"], sensitive_col="a", mediator_cols=["c", "z"], target_col="y",
                        categorical_mediators={"c": ["p", "q", "r"]})
    a = rng.integers(0, 2, n)
    cat = np.eye(3)[np.clip(a + rng.integers(0, 2, n), 0, 2)]
    M = np.hstack([cat, rng.standard_normal((n, 1)) + a[:, None]])
    ds = Dataset(schema=schema, X=rng.standard_normal((n, 1)), A=a, M=M, Y=rng.integers(0, 2, n))
    bundle = train_gan(ds, GanTrainConfig(epochs=3, batch_size=64))
    cf = bundle.counterfactual_std(ds)
    np.testing.assert_allclose(cf[:, :3].sum(axis=1), 1.0)
    assert np.all(np.isfinite(bundle.loss_history))
