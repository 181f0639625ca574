"""Step 1: a GAN whose generator maps (X, A, M) to both potential mediators and
whose discriminator guesses which slot of (observed factual, generated
counterfactual) holds the observed mediator."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, RoleSchema, Standardization
from .errors import NumericError, ShapeError, TrainingError, ValidationError
from .nn import MLP, Adam, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class GanTrainConfig:
    alpha: float = 1.0
    epochs: int = 300
    batch_size: int = 256
    lr: float = 0.0005
    k_alt: int = 1
    seed: int = 0
    hidden_dim: int = 64
    hidden_layers: int = 2

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if self.epochs < 1 or self.batch_size < 2 or self.k_alt < 1:
            raise ValidationError("epochs >= 1, batch_size >= 2 and k_alt >= 1 are required")

    def to_dict(self):
        return dataclasses.asdict(self)


def _softmax_blocks(out, blocks):
    probs = out.copy()
    for start, stop in blocks:
        z = out[:, start:stop]
        e = np.exp(z - z.max(axis=1, keepdims=True))
        probs[:, start:stop] = e / e.sum(axis=1, keepdims=True)
    return probs


def _softmax_blocks_grad(probs, grad, blocks):
    g = grad.copy()
    for start, stop in blocks:
        s = probs[:, start:stop]
        gs = grad[:, start:stop]
        g[:, start:stop] = s * (gs - (gs * s).sum(axis=1, keepdims=True))
    return g


class Generator:
    """Deterministic map ``(x, a, m) -> (m_hat_0, m_hat_1)`` on the standardized scale.

    Continuous mediator columns are linear outputs; each one-hot categorical
    block is passed through a softmax, separately for both slots.
    """

    def __init__(self, x_dim, m_dim, categorical_blocks=(), hidden_dim=64, hidden_layers=2, rng=None, net=None):
        self.x_dim = int(x_dim)
        self.m_dim = int(m_dim)
        self.categorical_blocks = [tuple(b) for b in categorical_blocks]
        self._out_blocks = [(s, e) for s, e in self.categorical_blocks]
        self._out_blocks += [(s + self.m_dim, e + self.m_dim) for s, e in self.categorical_blocks]
        self.net = net or MLP(
            [self.x_dim + 1 + self.m_dim] + [hidden_dim] * hidden_layers + [2 * self.m_dim],
            rng=rng,
            hidden_activation="leaky_relu",
            output_activation="identity",
            batch_norm=True,
        )

    def _inputs(self, x, a, m):
        x = np.asarray(x, dtype=float).reshape(len(a), -1)
        m = np.asarray(m, dtype=float).reshape(len(a), -1)
        if x.shape[1] != self.x_dim or m.shape[1] != self.m_dim:
            raise ShapeError(f"generator expects x width {self.x_dim} and m width {self.m_dim}, got {x.shape[1]}, {m.shape[1]}")
        a = np.asarray(a, dtype=float).reshape(-1, 1)
        if not np.all((a == 0) | (a == 1)):
            raise ValidationError("sensitive attribute must be 0/1")
        return np.hstack([x, a, m])

    def forward(self, x, a, m, mode="train"):
        raw, cache = self.net.forward(self._inputs(x, a, m), mode)
        out = _softmax_blocks(raw, self._out_blocks) if self._out_blocks else raw
        return out, (cache, out)

    def backward(self, cache, grad_out):
        net_cache, out = cache
        if self._out_blocks:
            grad_out = _softmax_blocks_grad(out, grad_out, self._out_blocks)
        return self.net.backward(net_cache, grad_out, input_grad=False)[0]

    def generate(self, x, a, m):
        """Both potential mediators ``(m_hat_0, m_hat_1)`` in eval mode."""
        out, _ = self.forward(x, a, m, mode="eval")
        return out[:, : self.m_dim], out[:, self.m_dim :]

    def counterfactual(self, x, a, m):
        """Generated counterfactual ``m_hat_{1-a}`` for every row."""
        m0, m1 = self.generate(x, a, m)
        a = np.asarray(a).reshape(-1, 1)
        return np.where(a == 1, m0, m1)

    def factual(self, x, a, m):
        m0, m1 = self.generate(x, a, m)
        a = np.asarray(a).reshape(-1, 1)
        return np.where(a == 1, m1, m0)


class Discriminator:
    """``(x, g0, g1) -> (D_0, D_1)``: softmax over two logits, one per slot."""

    def __init__(self, x_dim, m_dim, hidden_dim=64, hidden_layers=2, rng=None, net=None):
        self.x_dim = int(x_dim)
        self.m_dim = int(m_dim)
        self.net = net or MLP(
            [self.x_dim + 2 * self.m_dim] + [hidden_dim] * hidden_layers + [2],
            rng=rng,
            hidden_activation="leaky_relu",
            output_activation="identity",
        )

    def logits(self, x, g0, g1, mode="train"):
        return self.net.forward(np.hstack([x, g0, g1]), mode)

    def probs(self, x, g0, g1):
        z = self.logits(x, g0, g1, mode="eval")[0]
        return _softmax_blocks(z, [(0, 2)])


def combine_tilde(m, a, m0, m1):
    """Replace the generated factual slot with the observed mediator."""
    a = np.asarray(a).reshape(-1, 1)
    return np.where(a == 0, m, m0), np.where(a == 1, m, m1)


def _log_prob_of_slot(logits, a):
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    lp = log_p[np.arange(len(a)), a]
    if not np.all(np.isfinite(lp)):
        raise NumericError("discriminator produced non-finite log-probabilities")
    return lp, np.exp(log_p)


def adversarial_loss(disc: Discriminator, x, a, tilde):
    """Mean log-probability the discriminator assigns to the observed (factual) slot."""
    g0, g1 = tilde
    logits = disc.logits(x, g0, g1, mode="eval")[0]
    lp, _ = _log_prob_of_slot(logits, np.asarray(a, dtype=int))
    return float(lp.mean())


def reconstruction_loss(gen: Generator, x, a, m):
    """Mean squared L2 distance between observed and generated factual mediators."""
    if len(a) == 0:
        raise ValidationError("empty batch")
    diff = np.asarray(m, dtype=float).reshape(len(a), -1) - gen.factual(x, a, m)
    return float(np.mean(np.sum(diff**2, axis=1)))


@dataclass
class GanBundle:
    generator: Generator
    discriminator: Discriminator
    config: GanTrainConfig
    schema: RoleSchema
    standardization: Standardization
    loss_history: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    d_optimizer: Adam | None = None
    g_optimizer: Adam | None = None

    @property
    def identifier(self):
        h = hashlib.sha256()
        for p in self.generator.net.parameters() + self.discriminator.net.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        h.update(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        return h.hexdigest()[:16]

    def counterfactual_std(self, ds: Dataset):
        """Generated counterfactual mediators for ``ds`` on the network scale."""
        s = self.standardization
        return self.generator.counterfactual((ds.X - s.x_mean) / s.x_scale, ds.A, (ds.M - s.m_mean) / s.m_scale)

    def counterfactual_raw(self, ds: Dataset):
        s = self.standardization
        return self.counterfactual_std(ds) * s.m_scale + s.m_mean

    def save(self, path):
        meta = {
            "kind": "gan",
            "config": self.config.to_dict(),
            "schema": self.schema.to_dict(),
            "standardization": self.standardization.to_dict(),
            "x_dim": self.generator.x_dim,
            "m_dim": self.generator.m_dim,
            "categorical_blocks": self.generator.categorical_blocks,
            "loss_history": self.loss_history.tolist(),
            "identifier": self.identifier,
        }
        opts = {}
        if self.d_optimizer is not None:
            opts = {"discriminator": self.d_optimizer, "generator": self.g_optimizer}
        save_checkpoint(path, {"generator": self.generator.net, "discriminator": self.discriminator.net}, opts, meta)

    @classmethod
    def load(cls, path):
        nets, opts, meta = load_checkpoint(path)
        if meta.get("kind") != "gan":
            raise ValidationError(f"{path} is not a GAN checkpoint")
        gen = Generator(meta["x_dim"], meta["m_dim"], meta["categorical_blocks"], net=nets["generator"])
        disc = Discriminator(meta["x_dim"], meta["m_dim"], net=nets["discriminator"])
        return cls(
            generator=gen,
            discriminator=disc,
            config=GanTrainConfig(**meta["config"]),
            schema=RoleSchema.from_dict(meta["schema"]),
            standardization=Standardization.from_dict(meta["standardization"]),
            loss_history=np.asarray(meta["loss_history"], dtype=float).reshape(-1, 2),
            d_optimizer=opts.get("discriminator"),
            g_optimizer=opts.get("generator"),
        )


class BatchStream:
    """Endless stream of minibatch indices; reshuffles after each pass."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > self.n:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx

    def batches_per_epoch(self):
        return int(np.ceil(self.n / self.batch_size))


def categorical_blocks(schema: RoleSchema):
    return [(s, e) for _, s, e, cats in schema.blocks("mediator") if cats is not None]


def build_gan(schema: RoleSchema, cfg: GanTrainConfig):
    rng = np.random.default_rng(cfg.seed)
    x_dim, m_dim = schema.width("covariate"), schema.width("mediator")
    gen = Generator(x_dim, m_dim, categorical_blocks(schema), cfg.hidden_dim, cfg.hidden_layers, rng=rng)
    disc = Discriminator(x_dim, m_dim, cfg.hidden_dim, cfg.hidden_layers, rng=rng)
    return gen, disc


def discriminator_step(gen, disc, opt_d, x, a, m):
    """One ascent step of the discriminator on the adversarial objective."""
    out, _ = gen.forward(x, a, m, mode="train")
    g0, g1 = combine_tilde(m, a, out[:, : gen.m_dim], out[:, gen.m_dim :])
    logits, cache = disc.logits(x, g0, g1, mode="train")
    lp, p = _log_prob_of_slot(logits, a)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(a)), a] = 1.0
    # ascent on mean log p_a == descent on its negative
    grads, _ = disc.net.backward(cache, (p - onehot) / len(a), input_grad=False)
    opt_d.step(grads)
    return float(lp.mean())


def generator_step(gen, disc, opt_g, x, a, m, alpha):
    """One descent step of the generator on ``L_adv + alpha * L_f``.

    The adversarial gradient reaches the generator only through the
    counterfactual slot; the factual slot holds observed data.
    """
    d = gen.m_dim
    out, gcache = gen.forward(x, a, m, mode="train")
    m0, m1 = out[:, :d], out[:, d:]
    g0, g1 = combine_tilde(m, a, m0, m1)
    logits, dcache = disc.logits(x, g0, g1, mode="train")
    lp, p = _log_prob_of_slot(logits, a)
    n = len(a)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), a] = 1.0
    _, d_in = disc.net.backward(dcache, (onehot - p) / n, param_grads=False)
    xw = disc.x_dim
    grad_g0, grad_g1 = d_in[:, xw : xw + d], d_in[:, xw + d :]

    col = a.reshape(-1, 1)
    factual = np.where(col == 1, m1, m0)
    resid = factual - m
    l_f = float(np.mean(np.sum(resid**2, axis=1)))
    rec = 2.0 * alpha * resid / n
    grad_out = np.empty_like(out)
    grad_out[:, :d] = np.where(col == 0, rec, grad_g0)
    grad_out[:, d:] = np.where(col == 1, rec, grad_g1)
    opt_g.step(gen.backward(gcache, grad_out))
    return float(lp.mean()), l_f


def train_gan(train: Dataset, cfg: GanTrainConfig | None = None, progress=None) -> GanBundle:
    """Alternate ``k_alt`` discriminator ascent steps and ``k_alt`` generator
    descent steps per iteration; one epoch is ``ceil(n / batch_size)`` iterations."""
    cfg = cfg or GanTrainConfig()
    if not np.all((train.A == 0) | (train.A == 1)):
        raise ValidationError("train_gan requires a binary sensitive attribute")
    gen, disc = build_gan(train.schema, cfg)
    opt_d = Adam(disc.net, lr=cfg.lr)
    opt_g = Adam(gen.net, lr=cfg.lr)
    X, A, M = train.x_std(), train.A, train.m_std()
    d_stream = BatchStream(train.rows, cfg.batch_size, np.random.default_rng([cfg.seed, 1]))
    g_stream = BatchStream(train.rows, cfg.batch_size, np.random.default_rng([cfg.seed, 2]))
    history = np.zeros((cfg.epochs, 2))
    for epoch in range(cfg.epochs):
        adv_sum = rec_sum = 0.0
        n_iter = d_stream.batches_per_epoch()
        try:
            for _ in range(n_iter):
                for _ in range(cfg.k_alt):
                    idx = d_stream.next()
                    discriminator_step(gen, disc, opt_d, X[idx], A[idx], M[idx])
                for _ in range(cfg.k_alt):
                    idx = g_stream.next()
                    adv, rec = generator_step(gen, disc, opt_g, X[idx], A[idx], M[idx], cfg.alpha)
                    adv_sum += adv
                    rec_sum += rec
        except NumericError as exc:
            raise TrainingError(f"GAN training diverged in epoch {epoch}: {exc}", epoch=epoch) from exc
        history[epoch] = adv_sum / (n_iter * cfg.k_alt), rec_sum / (n_iter * cfg.k_alt)
        if not np.all(np.isfinite(history[epoch])):
            raise TrainingError(f"GAN training produced a non-finite loss in epoch {epoch}", epoch=epoch)
        if progress is not None:
            progress(epoch, history[epoch])
    log.info("GAN trained: final L_adv=%.4f L_f=%.4f", *history[-1])
    return GanBundle(
        generator=gen,
        discriminator=disc,
        config=cfg,
        schema=train.schema,
        standardization=train.standardization,
        loss_history=history,
        d_optimizer=opt_d,
        g_optimizer=opt_g,
    )


def discriminator_accuracy(bundle: GanBundle, ds: Dataset):
    """Fraction of rows where the discriminator puts more mass on the factual slot."""
    x, a, m = ds.x_std(), ds.A, ds.m_std()
    m0, m1 = bundle.generator.generate(x, a, m)
    g0, g1 = combine_tilde(m, a, m0, m1)
    p = bundle.discriminator.probs(x, g0, g1)
    return float(np.mean(p.argmax(axis=1) == a))
