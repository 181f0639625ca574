"""Small numpy feed-forward network engine.

Dense layers with optional batch normalization and spectral normalization,
explicit forward/backward passes, Adam, and a checkpoint format. Everything
runs in float64 so that finite-difference checks are meaningful.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError, ValidationError

LEAKY_SLOPE = 0.01
PROB_CLAMP = 1e-7
CHECKPOINT_VERSION = 1

ACTIVATIONS = ("leaky_relu", "sigmoid", "identity")
# Lipschitz constants of the activations, used when certifying a network.
ACTIVATION_LIPSCHITZ = {"leaky_relu": 1.0, "identity": 1.0, "sigmoid": 0.25}


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _activate(z, kind):
    if kind == "leaky_relu":
        return np.maximum(z, LEAKY_SLOPE * z)
    if kind == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(z, out, kind):
    if kind == "leaky_relu":
        g = (z > 0).astype(float)
        g *= 1.0 - LEAKY_SLOPE
        g += LEAKY_SLOPE
        return g
    if kind == "sigmoid":
        return out * (1.0 - out)
    return None


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, width, momentum=0.1, eps=1e-5):
        return cls(
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
            eps=eps,
        )


@dataclass
class DenseLayer:
    """Affine map ``x @ W.T + b`` followed by optional batch norm and an activation.

    ``weight`` is stored as (out, in). When ``spectral_norm`` is on, the
    layer uses ``weight / sigma`` where ``sigma = ||weight @ v||`` and ``v``
    is the persisted power-iteration vector.
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "leaky_relu"
    spectral_norm: bool = False
    power_iter_vector: np.ndarray | None = None
    batch_norm: BatchNormState | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ShapeError(f"weight {self.weight.shape} does not match bias {self.bias.shape}")
        if self.power_iter_vector is None:
            v = np.ones(self.weight.shape[1])
            self.power_iter_vector = v / np.linalg.norm(v)

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def sigma(self):
        """Current spectral-norm estimate used in the forward pass."""
        s = float(np.linalg.norm(self.weight @ self.power_iter_vector))
        return s if s > 0.0 else 1.0

    def effective_weight(self):
        if not self.spectral_norm:
            return self.weight
        return self.weight / self.sigma()

    def parameters(self):
        params = [self.weight, self.bias]
        if self.batch_norm is not None:
            params += [self.batch_norm.gamma, self.batch_norm.beta]
        return params


def init_dense(n_in, n_out, rng, activation="leaky_relu", spectral_norm=False, batch_norm=False):
    """Glorot-uniform weights, zero bias, random unit power-iteration vector."""
    limit = np.sqrt(6.0 / (n_in + n_out))
    weight = rng.uniform(-limit, limit, size=(n_out, n_in))
    v = rng.standard_normal(n_in)
    v /= np.linalg.norm(v)
    return DenseLayer(
        weight=weight,
        bias=np.zeros(n_out),
        activation=activation,
        spectral_norm=spectral_norm,
        power_iter_vector=v,
        batch_norm=BatchNormState.create(n_out) if batch_norm else None,
    )


def power_iteration(weight, v, n_iters):
    """Run ``n_iters`` rounds of power iteration from ``v``; returns (sigma, v)."""
    if n_iters < 1:
        raise ValidationError("n_power_iters must be >= 1")
    if not np.any(weight):
        return 1.0, v
    for _ in range(n_iters):
        u = weight @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 1.0, v
        u /= nu
        v = weight.T @ u
        v /= np.linalg.norm(v)
    return float(np.linalg.norm(weight @ v)), v


def spectral_normalize(layer: DenseLayer, n_power_iters: int = 1):
    """Refresh the layer's power-iteration vector and return ``weight / sigma``.

    An all-zero weight is returned unchanged.
    """
    sigma, v = power_iteration(layer.weight, layer.power_iter_vector, n_power_iters)
    layer.power_iter_vector = v
    return layer.weight / sigma


@dataclass
class Cache:
    net_id: int
    version: int
    mode: str
    records: list = field(default_factory=list)


class MLP:
    """Stack of :class:`DenseLayer` objects.

    Hidden layers share one activation; the output layer has its own. Batch
    norm, if requested, is applied to hidden layers only.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        rng: np.random.Generator | None = None,
        hidden_activation="leaky_relu",
        output_activation="identity",
        batch_norm=False,
        spectral_norm=False,
        layers: list[DenseLayer] | None = None,
    ):
        if len(sizes) < 2:
            raise ValidationError("an MLP needs at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        self.use_batch_norm = bool(batch_norm)
        self.use_spectral_norm = bool(spectral_norm)
        self.version = 0
        if layers is not None:
            self.layers = layers
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.layers = []
            for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
                last = i == len(self.sizes) - 2
                self.layers.append(
                    init_dense(
                        n_in,
                        n_out,
                        rng,
                        activation=output_activation if last else hidden_activation,
                        spectral_norm=spectral_norm,
                        batch_norm=batch_norm and not last,
                    )
                )

    @property
    def hidden_dim(self):
        return self.sizes[1] if len(self.sizes) > 2 else 0

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.parameters()]

    def refresh_spectral(self, n_power_iters=1):
        for layer in self.layers:
            if layer.spectral_norm:
                spectral_normalize(layer, n_power_iters)

    def forward(self, batch, mode="train"):
        """Returns ``(output, cache)``. Train mode uses batch statistics and
        updates the running batch-norm statistics."""
        if mode not in ("train", "eval"):
            raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(batch, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"expected batch of shape (n, {self.n_in}), got {x.shape}")
        if not np.isfinite(x.sum()) and not np.all(np.isfinite(x)):
            raise NumericError("non-finite values in network input")
        cache = Cache(id(self), self.version, mode)
        for i, layer in enumerate(self.layers):
            w = layer.effective_weight()
            z = x @ w.T + layer.bias
            bn_rec = None
            bn = layer.batch_norm
            if bn is not None:
                if mode == "train":
                    n = z.shape[0]
                    if n < 2:
                        raise ShapeError("batch norm in train mode needs at least 2 rows")
                    mu = z.mean(axis=0)
                    centered = z - mu
                    var = np.einsum("ij,ij->j", centered, centered) / n
                    inv_std = 1.0 / np.sqrt(var + bn.eps)
                    xhat = centered * inv_std
                    bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu
                    bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * var * n / (n - 1)
                    bn_rec = (xhat, inv_std)
                else:
                    xhat = (z - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
                z = bn.gamma * xhat + bn.beta
            out = _activate(z, layer.activation)
            if not np.isfinite(out.sum()) and not np.all(np.isfinite(out)):
                raise NumericError(f"non-finite activation in layer {i}")
            cache.records.append((x, w, z, out, bn_rec))
            x = out
        return x, cache

    def __call__(self, batch):
        return self.forward(batch, mode="eval")[0]

    def backward(self, cache: Cache, upstream_grad, param_grads=True, input_grad=True):
        """Backpropagate ``upstream_grad`` (dL/doutput).

        Returns ``(param_grads, input_grad)`` where ``param_grads`` lines up
        with :meth:`parameters`. Either part can be skipped and is then None.
        """
        if cache.net_id != id(self) or cache.version != self.version:
            raise UsageError("cache does not belong to the current state of this network")
        if cache.mode != "train":
            raise UsageError("backward requires a cache from a train-mode forward")
        g = np.asarray(upstream_grad, dtype=float)
        if g.shape != cache.records[-1][3].shape:
            raise ShapeError(f"upstream gradient shape {g.shape} != output shape {cache.records[-1][3].shape}")
        grads_rev = []
        first = len(self.layers) - 1
        for k, (layer, (x, w, z, out, bn_rec)) in enumerate(zip(reversed(self.layers), reversed(cache.records))):
            dact = _activation_grad(z, out, layer.activation)
            dz = g if dact is None else g * dact
            layer_grads = []
            bn = layer.batch_norm
            if bn is not None:
                xhat, inv_std = bn_rec
                dxhat = dz * bn.gamma
                if param_grads:
                    layer_grads = [(dz * xhat).sum(axis=0), dz.sum(axis=0)]
                n = dz.shape[0]
                dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            g = dz @ w if (input_grad or k < first) else None
            if not param_grads:
                continue
            dw_eff = dz.T @ x
            db = dz.sum(axis=0)
            if layer.spectral_norm:
                sigma = layer.sigma()
                v = layer.power_iter_vector
                u = (layer.weight @ v) / sigma
                dw = (dw_eff - np.sum(dw_eff * w) * np.outer(u, v)) / sigma
            else:
                dw = dw_eff
            grads_rev.append([dw, db] + layer_grads)
        if not param_grads:
            return None, g
        return [p for layer_grads in reversed(grads_rev) for p in layer_grads], g

    def lipschitz_bound(self, input_cols=None):
        """Product of exact layer spectral norms times activation Lipschitz constants.

        ``input_cols`` restricts the first layer to a subset of inputs, giving
        the constant w.r.t. those inputs with the rest held fixed. Batch norm
        in eval mode contributes ``max |gamma| / sqrt(running_var + eps)``.
        """
        c = 1.0
        for i, layer in enumerate(self.layers):
            w = layer.effective_weight()
            if i == 0 and input_cols is not None:
                w = w[:, list(input_cols)]
            c *= float(np.linalg.norm(w, 2)) if w.size else 0.0
            if layer.batch_norm is not None:
                bn = layer.batch_norm
                c *= float(np.max(np.abs(bn.gamma) / np.sqrt(bn.running_var + bn.eps)))
            c *= ACTIVATION_LIPSCHITZ[layer.activation]
        return c

    def config(self):
        return {
            "sizes": self.sizes,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "batch_norm": self.use_batch_norm,
            "spectral_norm": self.use_spectral_norm,
        }

    def state_arrays(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            p = f"{prefix}layer{i}."
            out[p + "weight"] = layer.weight
            out[p + "bias"] = layer.bias
            out[p + "power_iter_vector"] = layer.power_iter_vector
            if layer.batch_norm is not None:
                bn = layer.batch_norm
                out[p + "bn.gamma"] = bn.gamma
                out[p + "bn.beta"] = bn.beta
                out[p + "bn.running_mean"] = bn.running_mean
                out[p + "bn.running_var"] = bn.running_var
                out[p + "bn.hyper"] = np.array([bn.momentum, bn.eps])
        return out

    @classmethod
    def from_state(cls, config, arrays, prefix=""):
        net = cls(**config, rng=np.random.default_rng(0))
        for i, layer in enumerate(net.layers):
            p = f"{prefix}layer{i}."
            layer.weight = np.array(arrays[p + "weight"])
            layer.bias = np.array(arrays[p + "bias"])
            layer.power_iter_vector = np.array(arrays[p + "power_iter_vector"])
            if layer.batch_norm is not None:
                hyper = arrays[p + "bn.hyper"]
                layer.batch_norm = BatchNormState(
                    gamma=np.array(arrays[p + "bn.gamma"]),
                    beta=np.array(arrays[p + "bn.beta"]),
                    running_mean=np.array(arrays[p + "bn.running_mean"]),
                    running_var=np.array(arrays[p + "bn.running_var"]),
                    momentum=float(hyper[0]),
                    eps=float(hyper[1]),
                )
        return net


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]):
    """Bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    for g in grads:
        if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient passed to adam_step")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Adam:
    """Adam bound to one network; bumps the network version after each step."""

    def __init__(self, net: MLP, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.net = net
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads):
        adam_step(self.state, self.net.parameters(), grads)
        self.net.version += 1

    def state_arrays(self, prefix=""):
        out = {prefix + "step": np.array([self.state.step])}
        for i, (m, v) in enumerate(zip(self.state.first_moment, self.state.second_moment)):
            out[f"{prefix}m{i}"] = m
            out[f"{prefix}v{i}"] = v
        return out

    def load_state_arrays(self, arrays, prefix=""):
        self.state.step = int(arrays[prefix + "step"][0])
        n = len(self.net.parameters())
        if self.state.step:
            self.state.first_moment = [np.array(arrays[f"{prefix}m{i}"]) for i in range(n)]
            self.state.second_moment = [np.array(arrays[f"{prefix}v{i}"]) for i in range(n)]


def cross_entropy(probs, labels):
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels, dtype=float).ravel()
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValidationError("labels must be 0 or 1")
    p = np.clip(np.asarray(probs, dtype=float).ravel(), PROB_CLAMP, 1.0 - PROB_CLAMP)
    if p.shape != y.shape:
        raise ShapeError(f"probs {p.shape} and labels {y.shape} differ")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def cross_entropy_grad(probs, labels):
    """d(cross_entropy)/d(probs); zero where the clamp is active."""
    y = np.asarray(labels, dtype=float).ravel()
    raw = np.asarray(probs, dtype=float).ravel()
    p = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = -(y / p - (1.0 - y) / (1.0 - p)) / y.size
    g[(raw < PROB_CLAMP) | (raw > 1.0 - PROB_CLAMP)] = 0.0
    return g.reshape(np.shape(probs))


def save_checkpoint(path, nets: dict[str, MLP], optimizers: dict[str, Adam] | None = None, meta=None):
    """Write networks (and optionally their optimizers) to a versioned ``.npz``."""
    arrays = {}
    configs = {}
    for name, net in nets.items():
        configs[name] = net.config()
        arrays.update(net.state_arrays(prefix=f"{name}/"))
    opt_meta = {}
    for name, opt in (optimizers or {}).items():
        s = opt.state
        opt_meta[name] = {"lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps}
        arrays.update(opt.state_arrays(prefix=f"opt:{name}/"))
    header = {
        "format": "gcfn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "nets": configs,
        "optimizers": opt_meta,
        "meta": meta or {},
    }
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(nets, optimizers, meta)`` as written by :func:`save_checkpoint`."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    header = json.loads(arrays.pop("__header__").tobytes().decode())
    if header.get("format") != "gcfn-checkpoint":
        raise ValidationError(f"{path} is not a gcfn checkpoint")
    if header["version"] > CHECKPOINT_VERSION:
        raise ValidationError(f"checkpoint version {header['version']} is newer than supported")
    nets = {name: MLP.from_state(cfg, arrays, prefix=f"{name}/") for name, cfg in header["nets"].items()}
    optimizers = {}
    for name, hyper in header["optimizers"].items():
        opt = Adam(nets[name], **hyper)
        opt.load_state_arrays(arrays, prefix=f"opt:{name}/")
        optimizers[name] = opt
    return nets, optimizers, header["meta"]
