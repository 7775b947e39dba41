"""Small fully-connected classifier with hand-written forward/backward passes.

Parameters live in one flat array per model so that gossip averaging,
consensus averaging and optimizer buffers are plain vector arithmetic.
``weights`` and ``biases`` are views into that array.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, NumericalError

ACTIVATIONS = ("relu", "tanh")

# tolerance on sum-to-one for soft labels
SOFT_LABEL_ATOL = 1e-5


class MlpModel:
    """Multilayer perceptron ``input -> hidden... -> classes``.

    ``weights[l]`` has shape ``(layer_dims[l+1], layer_dims[l])`` and maps a
    row-vector batch ``x`` to ``x @ W.T + b``.
    """

    def __init__(self, layer_dims: Sequence[int], activation: str = "relu",
                 params: np.ndarray | None = None, dtype=np.float32):
        dims = tuple(int(d) for d in layer_dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise InvalidInputError(f"layer_dims must hold >= 2 positive sizes, got {layer_dims}")
        if activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {activation!r}")
        self.layer_dims = dims
        self.activation = activation
        n = sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))
        if params is None:
            params = np.zeros(n, dtype=dtype)
        else:
            params = np.ascontiguousarray(params)
            if params.shape != (n,):
                raise InvalidInputError(f"expected {n} parameters, got shape {params.shape}")
        self.params = params
        self.weights, self.biases = self.split(params)

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def dtype(self):
        return self.params.dtype

    def parameter_count(self) -> int:
        return self.params.size

    def split(self, flat: np.ndarray):
        """Return per-layer ``(weights, biases)`` views into a flat vector laid out like ``params``."""
        weights, biases = [], []
        pos = 0
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            weights.append(flat[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in))
            pos += fan_out * fan_in
            biases.append(flat[pos:pos + fan_out])
            pos += fan_out
        return weights, biases

    def with_params(self, params: np.ndarray) -> "MlpModel":
        return MlpModel(self.layer_dims, self.activation, params)

    def copy(self) -> "MlpModel":
        return self.with_params(self.params.copy())

    def astype(self, dtype) -> "MlpModel":
        return self.with_params(self.params.astype(dtype))

    def __repr__(self):
        return f"MlpModel({list(self.layer_dims)}, {self.activation!r}, dtype={self.dtype})"


def init_mlp(layer_dims: Sequence[int], rng: np.random.Generator,
             activation: str = "relu", dtype=np.float32) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    model = MlpModel(layer_dims, activation, dtype=dtype)
    for w in model.weights:
        fan_out, fan_in = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return model


def _check_batch(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != model.layer_dims[0]:
        raise InvalidInputError(
            f"batch shape {batch.shape} does not match model input width {model.layer_dims[0]}")
    return batch.astype(model.dtype, copy=False)


def _activate(kind, z):
    if kind == "relu":
        return np.maximum(z, 0)
    return np.tanh(z)


def _forward_cached(model: MlpModel, x: np.ndarray):
    acts = [x]
    pre = []
    h = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        if l == last:
            return z, acts, pre
        pre.append(z)
        h = _activate(model.activation, z)
        acts.append(h)
    raise AssertionError("unreachable")


def forward(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Logits of shape ``(rows, classes)``."""
    x = _check_batch(model, batch)
    logits, _, _ = _forward_cached(model, x)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite logits")
    return logits


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_with_temperature(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """``softmax(logits / tau)`` along the last axis."""
    if not tau > 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    z = np.asarray(logits) / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def check_soft_labels(probs: np.ndarray, atol: float = SOFT_LABEL_ATOL) -> np.ndarray:
    probs = np.asarray(probs)
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise InvalidInputError("soft labels must be finite and non-negative")
    sums = probs.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise InvalidInputError(f"soft labels must sum to 1 (worst sum {sums.flat[np.argmax(np.abs(sums - 1))]})")
    return probs


def _check_labels(labels, batch_size, num_classes):
    labels = np.asarray(labels)
    if labels.shape != (batch_size,):
        raise InvalidInputError(f"expected {batch_size} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidInputError(f"labels must lie in [0, {num_classes})")
    return labels.astype(np.int64, copy=False)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean ``-log softmax(logits)[label]`` and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    b, c = logits.shape
    labels = _check_labels(labels, b, c)
    logp = log_softmax(logits)
    rows = np.arange(b)
    loss = -logp[rows, labels].astype(np.float64).mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= b
    return float(loss), grad


def kd_loss(student_logits: np.ndarray, teacher_soft: np.ndarray, tau: float):
    """Temperature-squared scaled cross-entropy against teacher probabilities.

    ``loss = mean(tau**2 * -sum(t * log softmax(z / tau)))``; the gradient is
    ``tau * (softmax(z / tau) - t) / batch``.
    """
    if not tau > 0:
        raise InvalidInputError(f"temperature must be positive, got {tau}")
    z = np.asarray(student_logits)
    t = check_soft_labels(np.asarray(teacher_soft))
    if t.shape != z.shape:
        raise InvalidInputError(f"teacher shape {t.shape} != logits shape {z.shape}")
    b = z.shape[0]
    logp = log_softmax(z / tau)
    loss = tau * tau * -(t * logp).sum(axis=1).astype(np.float64).mean()
    grad = tau * (np.exp(logp) - t) / b
    return float(loss), grad.astype(z.dtype, copy=False)


@dataclass(frozen=True)
class LossSpec:
    """Per-sample supervision for :func:`backward`.

    A sample with a hard label (``labels[i] >= 0``) contributes cross-entropy;
    a sample with a soft target (``soft_mask[i]``) contributes the KD loss at
    ``tau``. A sample carrying both is weighted ``(1 - kd_weight) * CE +
    kd_weight * KD``. The batch loss is the mean over samples, plus
    ``0.5 * weight_decay * ||params||^2``.
    """

    labels: np.ndarray | None = None
    soft: np.ndarray | None = None
    soft_mask: np.ndarray | None = None
    tau: float = 1.0
    kd_weight: float = 1.0
    weight_decay: float = 0.0


def _sample_weights(spec: LossSpec, b: int, c: int):
    if spec.labels is not None:
        labels = np.asarray(spec.labels, dtype=np.int64)
        if labels.shape != (b,):
            raise InvalidInputError(f"expected {b} labels, got shape {labels.shape}")
        if labels.size and labels.max() >= c:
            raise InvalidInputError(f"labels must lie in [0, {c})")
        hard = labels >= 0
    else:
        labels = np.full(b, -1, dtype=np.int64)
        hard = np.zeros(b, dtype=bool)
    if spec.soft is not None:
        soft = np.asarray(spec.soft)
        if soft.shape != (b, c):
            raise InvalidInputError(f"soft targets shape {soft.shape} != ({b}, {c})")
        soft_on = np.ones(b, dtype=bool) if spec.soft_mask is None else np.asarray(spec.soft_mask, dtype=bool)
        check_soft_labels(soft[soft_on])
    else:
        soft = None
        soft_on = np.zeros(b, dtype=bool)
    if not np.all(hard | soft_on):
        raise InvalidInputError("every sample needs a hard label or a soft target")
    if not 0.0 <= spec.kd_weight <= 1.0:
        raise InvalidInputError("kd_weight must lie in [0, 1]")
    both = hard & soft_on
    a = np.where(both, 1.0 - spec.kd_weight, hard.astype(np.float64))
    s = np.where(both, spec.kd_weight, soft_on.astype(np.float64))
    return labels, hard, soft, soft_on, a, s


def loss_and_logit_grad(logits: np.ndarray, spec: LossSpec):
    """Loss (without weight decay) and gradient w.r.t. logits for a :class:`LossSpec`."""
    b, c = logits.shape
    if not spec.tau > 0:
        raise InvalidInputError(f"temperature must be positive, got {spec.tau}")
    labels, hard, soft, soft_on, a, s = _sample_weights(spec, b, c)
    dtype = logits.dtype
    per_sample = np.zeros(b, dtype=np.float64)
    grad = np.zeros_like(logits)
    if hard.any():
        logp = log_softmax(logits)
        idx = np.where(hard)[0]
        per_sample[idx] += a[idx] * -logp[idx, labels[idx]]
        g = np.exp(logp[idx])
        g[np.arange(idx.size), labels[idx]] -= 1
        grad[idx] += (a[idx, None] * g).astype(dtype)
    if soft_on.any():
        tau = spec.tau
        idx = np.where(soft_on)[0]
        t = soft[idx].astype(dtype, copy=False)
        logq = log_softmax(logits[idx] / tau)
        per_sample[idx] += s[idx] * tau * tau * -(t * logq).sum(axis=1)
        grad[idx] += (s[idx, None] * tau * (np.exp(logq) - t)).astype(dtype)
    grad /= b
    return float(per_sample.mean()), grad


def backward(model: MlpModel, batch: np.ndarray, loss_spec: LossSpec):
    """Loss and exact gradient w.r.t. all parameters, as a flat array in ``params`` layout."""
    x = _check_batch(model, batch)
    logits, acts, pre = _forward_cached(model, x)
    loss, delta = loss_and_logit_grad(logits, loss_spec)
    grad = np.empty_like(model.params)
    gw, gb = model.split(grad)
    for l in range(len(model.weights) - 1, -1, -1):
        gw[l][...] = delta.T @ acts[l]
        gb[l][...] = delta.sum(axis=0)
        if l == 0:
            break
        back = delta @ model.weights[l]
        if model.activation == "relu":
            delta = back * (pre[l - 1] > 0)
        else:
            delta = back * (1 - acts[l] * acts[l])
    if loss_spec.weight_decay:
        wd = loss_spec.weight_decay
        grad += model.dtype.type(wd) * model.params
        loss += 0.5 * wd * float(np.dot(model.params.astype(np.float64), model.params.astype(np.float64)))
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericalError("non-finite loss or gradient")
    return loss, grad


def predict(model: MlpModel, features: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    out = [forward(model, features[i:i + batch_size]) for i in range(0, len(features), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.num_classes), dtype=model.dtype)


def evaluate(model: MlpModel, features: np.ndarray, labels: np.ndarray):
    """``(accuracy, mean cross-entropy)`` on a labeled set."""
    logits = predict(model, features)
    loss, _ = cross_entropy(logits, labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return acc, loss


def average_models(models: Sequence[MlpModel]) -> MlpModel:
    """Parameter-wise uniform mean, accumulated in float64 in list order."""
    if not models:
        raise InvalidInputError("need at least one model")
    first = models[0]
    acc = np.zeros(first.parameter_count(), dtype=np.float64)
    for m in models:
        if m.layer_dims != first.layer_dims:
            raise InvalidInputError("cannot average models with different shapes")
        acc += m.params
    return first.with_params((acc / len(models)).astype(first.dtype))
