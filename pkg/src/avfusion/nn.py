"""Tiny numpy neural network engine.

Fixed layer menu: dilated valid 1-D convolution, ReLU, statistics pooling,
dense, softmax. All layer kernels operate on a leading batch axis; convolution
inputs are ``(batch, time, channels)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .errors import (
    CorruptFile,
    EmptyDataset,
    InvalidConfig,
    InvalidLabel,
    LabelOutOfRange,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

STATPOOL_EPS = 1e-8


@dataclass(frozen=True)
class Conv1d:
    in_ch: int
    out_ch: int
    kernel: int
    dilation: int = 1

    @property
    def span(self) -> int:
        return self.dilation * (self.kernel - 1)


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class StatPool:
    pass


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Softmax:
    pass


LAYER_TAGS = {Conv1d: 1, ReLU: 2, StatPool: 3, Dense: 4, Softmax: 5}


@dataclass
class Network:
    layers: tuple
    params: list  # per layer: [] or [weight, bias]
    seed: int = 0

    def copy(self) -> "Network":
        return Network(self.layers, [[p.copy() for p in ps] for ps in self.params], self.seed)

    @property
    def n_params(self) -> int:
        return sum(p.size for ps in self.params for p in ps)

    @property
    def output_dim(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, Dense):
                return layer.out_dim
            if isinstance(layer, Conv1d):
                return layer.out_ch
        raise ShapeMismatch("network has no parametric layer")

    @property
    def is_sequence_model(self) -> bool:
        return bool(self.layers) and isinstance(self.layers[0], Conv1d)

    @property
    def receptive_field(self) -> int:
        return 1 + sum(l.span for l in self.layers if isinstance(l, Conv1d))

    def flat_params(self) -> list[np.ndarray]:
        return [p for ps in self.params for p in ps]


def check_layers(layers) -> None:
    """Validate that adjacent layer dimensions chain together."""
    width = None
    sequence = None
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv1d):
            if sequence is False:
                raise ShapeMismatch(f"layer {i}: Conv1d after pooling")
            if width is not None and layer.in_ch != width:
                raise ShapeMismatch(f"layer {i}: Conv1d expects {layer.in_ch} channels, gets {width}")
            if min(layer.in_ch, layer.out_ch, layer.kernel, layer.dilation) < 1:
                raise ShapeMismatch(f"layer {i}: non-positive Conv1d dimension")
            width, sequence = layer.out_ch, True
        elif isinstance(layer, StatPool):
            if sequence is not True:
                raise ShapeMismatch(f"layer {i}: StatPool needs a sequence input")
            width, sequence = 2 * width, False
        elif isinstance(layer, Dense):
            if sequence:
                raise ShapeMismatch(f"layer {i}: Dense on a sequence; pool first")
            if width is not None and layer.in_dim != width:
                raise ShapeMismatch(f"layer {i}: Dense expects {layer.in_dim}, gets {width}")
            width, sequence = layer.out_dim, False
        elif isinstance(layer, Softmax):
            if i != len(layers) - 1:
                raise ShapeMismatch("Softmax must be the last layer")
        elif not isinstance(layer, ReLU):
            raise ShapeMismatch(f"unknown layer {layer!r}")


def init_network(layers, seed: int = 0) -> Network:
    """He-uniform weights, zero biases."""
    layers = tuple(layers)
    check_layers(layers)
    rng = np.random.default_rng(seed)
    params = []
    for layer in layers:
        if isinstance(layer, Conv1d):
            fan_in = layer.in_ch * layer.kernel
            lim = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-lim, lim, size=(layer.out_ch, layer.in_ch, layer.kernel))
            params.append([w, np.zeros(layer.out_ch)])
        elif isinstance(layer, Dense):
            lim = np.sqrt(6.0 / layer.in_dim)
            w = rng.uniform(-lim, lim, size=(layer.out_dim, layer.in_dim))
            params.append([w, np.zeros(layer.out_dim)])
        else:
            params.append([])
    return Network(layers, params, seed)


# ---------------------------------------------------------------------------
# layer kernels


def conv1d_forward(x, w, b, dilation):
    out_ch, in_ch, kernel = w.shape
    t_out = x.shape[1] - dilation * (kernel - 1)
    if t_out < 1:
        raise ShapeMismatch(f"sequence of {x.shape[1]} frames shorter than conv span")
    y = np.broadcast_to(b, (x.shape[0], t_out, out_ch)).copy()
    for k in range(kernel):
        y += x[:, k * dilation : k * dilation + t_out, :] @ w[:, :, k].T
    return y


def conv1d_backward(x, w, dilation, dy):
    out_ch, in_ch, kernel = w.shape
    t_out = dy.shape[1]
    dx = np.zeros_like(x)
    dw = np.empty_like(w)
    for k in range(kernel):
        xs = x[:, k * dilation : k * dilation + t_out, :]
        dw[:, :, k] = np.einsum("bto,bti->oi", dy, xs)
        dx[:, k * dilation : k * dilation + t_out, :] += dy @ w[:, :, k]
    return dx, dw, dy.sum(axis=(0, 1))


def stat_pool_batch(x):
    mean = x.mean(axis=1)
    dev = x - mean[:, None, :]
    std = np.sqrt(np.mean(dev * dev, axis=1) + STATPOOL_EPS)
    return np.concatenate([mean, std], axis=1)


def stat_pool(frames) -> np.ndarray:
    """Per-channel mean followed by per-channel population std (``sqrt(var + 1e-8)``)."""
    frames = np.asarray(getattr(frames, "values", frames), dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ShapeMismatch("stat_pool expects a non-empty T x C matrix")
    return stat_pool_batch(frames[None])[0]


def stat_pool_backward(x, dy):
    c = x.shape[2]
    t = x.shape[1]
    mean = x.mean(axis=1, keepdims=True)
    dev = x - mean
    std = np.sqrt(np.mean(dev * dev, axis=1, keepdims=True) + STATPOOL_EPS)
    dmean = dy[:, None, :c]
    dstd = dy[:, None, c:]
    return dmean / t + dstd * dev / (t * std)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label: int) -> tuple[float, np.ndarray]:
    """Loss ``-log p[label]`` and its gradient ``p - onehot(label)``."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if not 0 <= int(label) < k or int(label) != label:
        raise InvalidLabel(f"label {label} outside [0, {k})")
    z = logits - logits.max()
    log_norm = np.log(np.exp(z).sum())
    probs = np.exp(z - log_norm)
    grad = probs.copy()
    grad[label] -= 1.0
    return float(log_norm - z[label]), grad


def batch_cross_entropy(logits, labels):
    """Mean loss over a batch and the gradient of that mean."""
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(labels))
    losses = log_norm - z[rows, labels]
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1.0
    return losses, grad


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ActivationTrace:
    inputs: list  # input to each layer (batched)
    logits: np.ndarray  # batched pre-softmax output
    probs: np.ndarray | None
    batched: bool = True

    @property
    def output(self):
        out = self.probs if self.probs is not None else self.logits
        return out if self.batched else out[0]


def _as_batch(net: Network, x):
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    single_ndim = 2 if net.is_sequence_model else 1
    if x.ndim == single_ndim:
        return x[None], False
    if x.ndim == single_ndim + 1:
        return x, True
    raise ShapeMismatch(f"input with {x.ndim} dims does not fit this network")


def forward(net: Network, x) -> ActivationTrace:
    """Run the network; accepts a single input or a batch along axis 0."""
    h, batched = _as_batch(net, x)
    inputs = []
    probs = None
    logits = None
    for layer, ps in zip(net.layers, net.params):
        inputs.append(h)
        if isinstance(layer, Conv1d):
            if h.shape[2] != layer.in_ch:
                raise ShapeMismatch(f"Conv1d expects {layer.in_ch} channels, got {h.shape[2]}")
            h = conv1d_forward(h, ps[0], ps[1], layer.dilation)
        elif isinstance(layer, ReLU):
            h = np.maximum(h, 0.0)
        elif isinstance(layer, StatPool):
            h = stat_pool_batch(h)
        elif isinstance(layer, Dense):
            if h.shape[-1] != layer.in_dim:
                raise ShapeMismatch(f"Dense expects {layer.in_dim} inputs, got {h.shape[-1]}")
            h = h @ ps[0].T + ps[1]
        elif isinstance(layer, Softmax):
            logits = h
            probs = softmax(h)
    if logits is None:
        logits = h
    return ActivationTrace(inputs, logits, probs, batched)


def backward(net: Network, trace: ActivationTrace, loss_grad) -> list:
    """Gradients of the loss w.r.t. every parameter array.

    ``loss_grad`` is the gradient w.r.t. the pre-softmax logits (a Softmax layer
    is treated as part of the loss).
    """
    g = np.asarray(loss_grad, dtype=np.float64)
    if not trace.batched and g.ndim == 1:
        g = g[None]
    if g.shape != trace.logits.shape:
        raise ShapeMismatch(f"loss gradient {g.shape} vs logits {trace.logits.shape}")
    grads: list = [[] for _ in net.layers]
    for i in range(len(net.layers) - 1, -1, -1):
        layer, ps, x = net.layers[i], net.params[i], trace.inputs[i]
        if isinstance(layer, Softmax):
            continue
        if isinstance(layer, Conv1d):
            g, dw, db = conv1d_backward(x, ps[0], layer.dilation, g)
            grads[i] = [dw, db]
        elif isinstance(layer, ReLU):
            g = g * (x > 0)
        elif isinstance(layer, StatPool):
            g = stat_pool_backward(x, g)
        elif isinstance(layer, Dense):
            grads[i] = [g.T @ x, g.sum(axis=0)]
            g = g @ ps[0]
    return grads


def loss_and_grads(net: Network, x, labels):
    trace = forward(net, x)
    losses, g = batch_cross_entropy(trace.logits, np.asarray(labels))
    n = len(labels)
    return losses, backward(net, trace, g / n)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    epochs: int = 8
    batch_size: int = 128
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    momentum: float = 0.9
    seed: int = 0
    min_gradient_norm: float = 1e-6

    def validate(self) -> None:
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise InvalidConfig("need 0 < lr_end <= lr_start")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig("need 0 <= momentum < 1")

    def lr_for_epoch(self, epoch: int) -> float:
        """Geometric interpolation; epoch is 0-based."""
        if self.epochs == 1:
            return self.lr_start
        frac = epoch / (self.epochs - 1)
        return float(self.lr_start * (self.lr_end / self.lr_start) ** frac)


@dataclass
class OptimizerState:
    velocity: list

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([[np.zeros_like(p) for p in ps] for ps in params])


def sgd_momentum_step(params, grads, state: OptimizerState, lr: float, momentum: float):
    """``v <- momentum*v + g``; ``p <- p - lr*v`` (in place). Returns (params, state)."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ShapeMismatch("params, grads and velocity differ in layer count")
    for ps, gs, vs in zip(params, grads, state.velocity):
        if len(ps) != len(gs) or len(ps) != len(vs):
            raise ShapeMismatch("params, grads and velocity differ in array count")
        for p, g, v in zip(ps, gs, vs):
            if p.shape != g.shape or p.shape != v.shape:
                raise ShapeMismatch(f"shape {p.shape} vs grad {g.shape} vs velocity {v.shape}")
            v *= momentum
            v += g
            p -= lr * v
    return params, state


def grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for gs in grads for g in gs)))


@dataclass
class TrainResult:
    network: Network
    losses: list = field(default_factory=list)  # mean training loss per epoch
    learning_rates: list = field(default_factory=list)
    stopped_early: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.losses)


def _stack_groups(inputs, idx):
    """Group a minibatch by input shape so each group can be stacked."""
    if isinstance(inputs, np.ndarray):
        return [(idx, inputs[idx])]
    groups: dict = {}
    for i in idx:
        groups.setdefault(np.shape(inputs[i]), []).append(i)
    return [(np.array(g), np.stack([np.asarray(inputs[i]) for i in g])) for g in groups.values()]


def train(net: Network, inputs, labels, cfg: TrainConfig | None = None) -> TrainResult:
    """Mini-batch SGD with momentum on softmax cross-entropy.

    ``inputs`` is either a stacked array or a list of per-sample arrays
    (variable-length sequences are fine). Shuffling depends only on
    ``cfg.seed``. Training stops once a mini-batch gradient norm falls below
    ``cfg.min_gradient_norm``.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0 or len(inputs) != n:
        raise EmptyDataset("no training samples" if n == 0 else "inputs and labels differ in length")
    k = net.output_dim
    if labels.min() < 0 or labels.max() >= k:
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    if not isinstance(inputs, np.ndarray):
        inputs = [np.asarray(getattr(x, "values", x), dtype=np.float64) for x in inputs]

    net = net.copy()
    state = OptimizerState.zeros_like(net.params)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(net)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_for_epoch(epoch)
        order = rng.permutation(n)
        total = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads = [[np.zeros_like(p) for p in ps] for ps in net.params]
            for gidx, xb in _stack_groups(inputs, idx):
                losses, g = loss_and_grads(net, xb, labels[gidx])
                total += float(losses.sum())
                w = len(gidx) / len(idx)
                for acc, part in zip(grads, g):
                    for a, p in zip(acc, part):
                        a += w * p
            seen += len(idx)
            if grad_norm(grads) < cfg.min_gradient_norm:
                result.stopped_early = True
                break
            sgd_momentum_step(net.params, grads, state, lr, cfg.momentum)
        result.losses.append(total / seen)
        result.learning_rates.append(lr)
        logger.debug("epoch %d lr %.3g loss %.6f", epoch + 1, lr, total / seen)
        if result.stopped_early:
            logger.info("minimum gradient criterion met in epoch %d", epoch + 1)
            break
    return result


def gradient_check(
    net: Network,
    x,
    label: int,
    eps: float = 1e-5,
    seed: int = 0,
    analytic=None,
) -> float:
    """Largest relative disagreement between backprop and central differences.

    From every parameter array a random subset (1% of entries, at least 50 or
    the whole array if smaller) is perturbed. For each array the error is
    ``max|g_a - g_n| / max(max|g_a|, max|g_n|, 1e-8)`` over the sampled entries;
    the maximum over arrays is returned. ``analytic`` overrides the backprop
    gradients, which lets tests inject faults.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise InvalidConfig("eps must lie in [1e-7, 1e-3]")
    xb, _ = _as_batch(net, x)
    if xb.shape[0] != 1:
        raise ShapeMismatch("gradient_check takes a single input")
    labels = np.array([label])
    if analytic is None:
        _, analytic = loss_and_grads(net, xb, labels)
    rng = np.random.default_rng(seed)
    work = net.copy()

    def loss():
        return float(batch_cross_entropy(forward(work, xb).logits, labels)[0][0])

    worst = 0.0
    for li, ps in enumerate(work.params):
        for pi, p in enumerate(ps):
            flat = p.reshape(-1)
            count = min(flat.size, max(50, int(np.ceil(0.01 * flat.size))))
            picks = rng.choice(flat.size, size=count, replace=False)
            g_a = analytic[li][pi].reshape(-1)[picks]
            g_n = np.empty(count)
            for j, idx in enumerate(picks):
                orig = flat[idx]
                flat[idx] = orig + eps
                up = loss()
                flat[idx] = orig - eps
                down = loss()
                flat[idx] = orig
                g_n[j] = (up - down) / (2 * eps)
            scale = max(np.abs(g_a).max(), np.abs(g_n).max(), 1e-8)
            worst = max(worst, float(np.abs(g_a - g_n).max() / scale))
    return worst


# ---------------------------------------------------------------------------
# serialization


def network_to_bytes(net: Network) -> bytes:
    out = [formats.MAGIC_NETWORK, formats.pack_u32(len(net.layers))]
    for layer in net.layers:
        tag = LAYER_TAGS[type(layer)]
        if isinstance(layer, Conv1d):
            dims = (layer.in_ch, layer.out_ch, layer.kernel, layer.dilation)
        elif isinstance(layer, Dense):
            dims = (layer.in_dim, layer.out_dim, 0, 0)
        else:
            dims = (0, 0, 0, 0)
        out.append(formats.pack_u32(tag, *dims))
    for p in net.flat_params():
        out.append(formats.pack_f32(p))
    return b"".join(out)


def network_from_bytes(data: bytes) -> Network:
    r = formats.Reader(data, formats.MAGIC_NETWORK)
    layers = []
    for _ in range(r.u32()):
        tag, a, b, c, d = (r.u32() for _ in range(5))
        if tag == 1:
            layers.append(Conv1d(a, b, c, d))
        elif tag == 2:
            layers.append(ReLU())
        elif tag == 3:
            layers.append(StatPool())
        elif tag == 4:
            layers.append(Dense(a, b))
        elif tag == 5:
            layers.append(Softmax())
        else:
            raise CorruptFile(f"unknown layer tag {tag}")
    try:
        check_layers(layers)
    except ShapeMismatch as exc:
        raise CorruptFile(str(exc)) from exc
    params = []
    for layer in layers:
        if isinstance(layer, Conv1d):
            w = r.f32(layer.out_ch * layer.in_ch * layer.kernel).reshape(layer.out_ch, layer.in_ch, layer.kernel)
            params.append([w, r.f32(layer.out_ch)])
        elif isinstance(layer, Dense):
            w = r.f32(layer.out_dim * layer.in_dim).reshape(layer.out_dim, layer.in_dim)
            params.append([w, r.f32(layer.out_dim)])
        else:
            params.append([])
    r.finish()
    return Network(tuple(layers), params)


# ---------------------------------------------------------------------------
# multinomial logistic regression (single Dense + Softmax)


@dataclass
class SoftmaxModel:
    weights: np.ndarray  # n_classes x input_dim
    bias: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            from .errors import DimMismatch

            raise DimMismatch(f"model expects {self.input_dim} inputs, got {x.shape[-1]}")
        return x @ self.weights.T + self.bias

    def posteriors(self, x) -> np.ndarray:
        return softmax(self.logits(x))

    def predict(self, x):
        """Argmax class (ties -> lowest index) and posterior for one or many inputs."""
        post = self.posteriors(x)
        return np.argmax(post, axis=-1), post

    def to_bytes(self) -> bytes:
        return (
            formats.MAGIC_SOFTMAX
            + formats.pack_u32(self.n_classes, self.input_dim)
            + formats.pack_f32(self.weights)
            + formats.pack_f32(self.bias)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "SoftmaxModel":
        r = formats.Reader(data, formats.MAGIC_SOFTMAX)
        k, d = r.u32(), r.u32()
        if k == 0 or d == 0:
            raise CorruptFile("empty softmax model")
        w = r.f32(k * d).reshape(k, d)
        b = r.f32(k)
        r.finish()
        return cls(w, b)


def train_softmax(X, labels, cfg: TrainConfig, n_classes: int | None = None) -> SoftmaxModel:
    """Fit a softmax classifier on standardized inputs.

    The standardization is folded back into the returned weights, so the model
    applies directly to raw inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyDataset("need a non-empty N x D matrix")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    sigma = np.where(sigma > 1e-12, sigma, 1.0)
    net = init_network([Dense(X.shape[1], n_classes), Softmax()], seed=cfg.seed)
    result = train(net, (X - mu) / sigma, labels, cfg)
    w, b = result.network.params[0]
    w = w / sigma
    return SoftmaxModel(w, b - w @ mu)
