"""Step 2: a classifier h(X, M) trained on cross-entropy plus a penalty on the
gap between its predictions for observed and generated counterfactual mediators."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import Dataset, RoleSchema, Standardization, encode_features
from .errors import NumericError, ShapeError, TrainingError, ValidationError
from .gan import BatchStream, GanBundle, Generator
from .nn import MLP, Adam, cross_entropy, cross_entropy_grad, load_checkpoint, save_checkpoint

THRESHOLD = 0.5
# power iterations used when certifying spectral-normalized layers
CERT_POWER_ITERS = 30


@dataclass
class PredictorTrainConfig:
    lam: float = 0.5
    epochs: int = 30
    batch_size: int = 256
    lr: float = 0.005
    seed: int = 0
    hidden_dim: int = 64
    hidden_layers: int = 2
    spectral_norm: bool = False
    cache_counterfactuals: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError("lambda must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")

    def to_dict(self):
        return dataclasses.asdict(self)


class Predictor:
    """MLP on ``[x, m]`` with a sigmoid output. The sensitive attribute is never an input."""

    def __init__(self, x_dim, m_dim, hidden_dim=64, hidden_layers=2, spectral_norm=False, rng=None, net=None):
        self.x_dim = int(x_dim)
        self.m_dim = int(m_dim)
        self.net = net or MLP(
            [self.x_dim + self.m_dim] + [hidden_dim] * hidden_layers + [1],
            rng=rng,
            hidden_activation="leaky_relu",
            output_activation="sigmoid",
            spectral_norm=spectral_norm,
        )

    @property
    def spectral_norm_enabled(self):
        return self.net.use_spectral_norm

    def _inputs(self, x, m):
        x = np.asarray(x, dtype=float)
        m = np.asarray(m, dtype=float)
        x = x.reshape(len(x), -1)
        m = m.reshape(len(m), -1)
        if x.shape[1] != self.x_dim or m.shape[1] != self.m_dim or len(x) != len(m):
            raise ShapeError(f"predictor expects x width {self.x_dim} and m width {self.m_dim}, got {x.shape}, {m.shape}")
        return np.hstack([x, m])

    def forward(self, x, m, mode="train"):
        out, cache = self.net.forward(self._inputs(x, m), mode)
        return out[:, 0], cache

    def predict(self, x, m):
        """Probability of the positive class, shape (n,)."""
        return self.forward(x, m, mode="eval")[0]

    def predict_label(self, x, m):
        return (self.predict(x, m) >= THRESHOLD).astype(int)

    def mediator_cols(self):
        return range(self.x_dim, self.x_dim + self.m_dim)

    def lipschitz_constant(self):
        """Certified Lipschitz constant of ``m -> h(x, m)`` on the network input scale."""
        return self.net.lipschitz_bound(input_cols=self.mediator_cols())


def _check_generator(h: Predictor, gen: Generator):
    if gen.x_dim != h.x_dim or gen.m_dim != h.m_dim:
        raise ValidationError(
            f"generator widths (x={gen.x_dim}, m={gen.m_dim}) do not match predictor (x={h.x_dim}, m={h.m_dim})"
        )


def rcm(h: Predictor, x, a, m, gen: Generator):
    """Mean squared prediction gap between observed and generated counterfactual
    mediators. The generator runs in eval mode and receives no gradient."""
    _check_generator(h, gen)
    m_cf = gen.counterfactual(x, a, m)
    return rcm_from(h, x, m, m_cf)


def rcm_from(h: Predictor, x, m, m_cf):
    d = h.predict(x, m) - h.predict(x, m_cf)
    return float(np.mean(d**2))


def total_loss(h: Predictor, x, a, m, y, gen: Generator, lam):
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    ce = cross_entropy(h.predict(x, m), y)
    if lam == 0:
        return ce
    return ce + lam * rcm(h, x, a, m, gen)


@dataclass
class PredictorBundle:
    predictor: Predictor
    config: PredictorTrainConfig
    schema: RoleSchema
    standardization: Standardization
    gan_ref: str | None = None
    loss_history: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    lipschitz_cert: float = float("nan")

    def features(self, ds: Dataset):
        s = self.standardization
        return (ds.X - s.x_mean) / s.x_scale, (ds.M - s.m_mean) / s.m_scale

    def to_input_scale(self, M_raw):
        s = self.standardization
        return (np.asarray(M_raw) - s.m_mean) / s.m_scale

    def predict(self, ds: Dataset):
        x, m = self.features(ds)
        return self.predictor.predict(x, m)

    def predict_frame(self, df: pd.DataFrame):
        """Append a ``p_hat`` column to a frame holding the schema's covariates and mediators."""
        X, M = encode_features(df, self.schema)
        s = self.standardization
        out = df.copy()
        out["p_hat"] = self.predictor.predict((X - s.x_mean) / s.x_scale, (M - s.m_mean) / s.m_scale)
        return out

    def save(self, path):
        meta = {
            "kind": "predictor",
            "config": self.config.to_dict(),
            "schema": self.schema.to_dict(),
            "standardization": self.standardization.to_dict(),
            "x_dim": self.predictor.x_dim,
            "m_dim": self.predictor.m_dim,
            "gan_ref": self.gan_ref,
            "loss_history": self.loss_history.tolist(),
            "lipschitz_cert": self.lipschitz_cert,
        }
        save_checkpoint(path, {"predictor": self.predictor.net}, meta=meta)

    @classmethod
    def load(cls, path):
        nets, _, meta = load_checkpoint(path)
        if meta.get("kind") != "predictor":
            raise ValidationError(f"{path} is not a predictor checkpoint")
        return cls(
            predictor=Predictor(meta["x_dim"], meta["m_dim"], net=nets["predictor"]),
            config=PredictorTrainConfig(**meta["config"]),
            schema=RoleSchema.from_dict(meta["schema"]),
            standardization=Standardization.from_dict(meta["standardization"]),
            gan_ref=meta["gan_ref"],
            loss_history=np.asarray(meta["loss_history"], dtype=float).reshape(-1, 2),
            lipschitz_cert=meta["lipschitz_cert"],
        )


def gan_counterfactuals(gan: GanBundle, ds: Dataset, standardization: Standardization):
    """Generated counterfactual mediators for ``ds`` expressed on ``standardization``'s scale."""
    if gan.standardization.to_dict() == standardization.to_dict():
        return gan.counterfactual_std(ds)
    return (gan.counterfactual_raw(ds) - standardization.m_mean) / standardization.m_scale


def batch_gradients(h: Predictor, x, m, y, m_hat, lam):
    """Parameter gradients of ``CE + lam * R_cm`` on one batch, in train mode.

    ``m_hat`` may be None, in which case R_cm is reported as 0. Returns (grads, ce, r_cm).
    """
    p1, c1 = h.forward(x, m)
    ce = cross_entropy(p1, y)
    g1 = cross_entropy_grad(p1, y)
    if m_hat is None:
        return h.net.backward(c1, g1[:, None], input_grad=False)[0], ce, 0.0
    p2, c2 = h.forward(x, m_hat)
    diff = p1 - p2
    r = float(np.mean(diff**2))
    if lam == 0:
        return h.net.backward(c1, g1[:, None], input_grad=False)[0], ce, r
    gd = lam * 2.0 * diff / len(x)
    grads1, _ = h.net.backward(c1, (g1 + gd)[:, None], input_grad=False)
    grads2, _ = h.net.backward(c2, -gd[:, None], input_grad=False)
    return [u + v for u, v in zip(grads1, grads2)], ce, r


def train_predictor(train: Dataset, gan: GanBundle | None, cfg: PredictorTrainConfig | None = None, progress=None):
    """Minibatch Adam on ``cross_entropy + lam * R_cm`` with the generator frozen.

    ``gan`` may be None only when ``lam == 0``; R_cm is then reported as 0.
    """
    cfg = cfg or PredictorTrainConfig()
    if gan is None and cfg.lam > 0:
        raise ValidationError("a trained GAN is required when lambda > 0")
    if gan is not None and gan.schema.to_dict() != train.schema.to_dict():
        raise ValidationError("GAN was trained on a different schema")
    rng = np.random.default_rng([cfg.seed, 3])
    s = train.standardization
    x_dim, m_dim = train.schema.width("covariate"), train.schema.width("mediator")
    h = Predictor(x_dim, m_dim, cfg.hidden_dim, cfg.hidden_layers, cfg.spectral_norm, rng=np.random.default_rng([cfg.seed, 4]))
    opt = Adam(h.net, lr=cfg.lr)
    X, M, Y = train.x_std(), train.m_std(), train.Y
    M_hat = gan_counterfactuals(gan, train, s) if (gan is not None and cfg.cache_counterfactuals) else None

    stream = BatchStream(train.rows, cfg.batch_size, rng)
    history = np.zeros((cfg.epochs, 2))
    for epoch in range(cfg.epochs):
        ce_sum = r_sum = 0.0
        n_iter = stream.batches_per_epoch()
        try:
            for _ in range(n_iter):
                idx = stream.next()
                if h.spectral_norm_enabled:
                    h.net.refresh_spectral(1)
                m_hat = None
                if gan is not None:
                    m_hat = M_hat[idx] if M_hat is not None else gan_counterfactuals(gan, train.subset(idx), s)
                grads, ce, r = batch_gradients(h, X[idx], M[idx], Y[idx], m_hat, cfg.lam)
                opt.step(grads)
                ce_sum += ce
                r_sum += r
        except NumericError as exc:
            raise TrainingError(f"predictor training diverged in epoch {epoch}: {exc}", epoch=epoch) from exc
        history[epoch] = ce_sum / n_iter, r_sum / n_iter
        if not np.all(np.isfinite(history[epoch])):
            raise TrainingError(f"predictor training produced a non-finite loss in epoch {epoch}", epoch=epoch)
        if progress is not None:
            progress(epoch, history[epoch])

    if h.spectral_norm_enabled:
        h.net.refresh_spectral(CERT_POWER_ITERS)
    return PredictorBundle(
        predictor=h,
        config=cfg,
        schema=train.schema,
        standardization=s,
        gan_ref=None if gan is None else gan.identifier,
        loss_history=history,
        lipschitz_cert=h.lipschitz_constant(),
    )
