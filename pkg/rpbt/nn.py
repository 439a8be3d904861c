"""
Feed-forward policy and value networks with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector (`ParamVector`) described by a `ParamLayout`, so
copying, checkpointing and optimiser updates all act on a single array. Gaussian policy heads
keep their log standard deviations as free parameters appended after the network weights.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np

from rpbt.const import HIDDEN_SIZES
from rpbt.model import DomainError

LOG_2PI = math.log(2.0 * math.pi)

# types
Shape = Tuple[int, ...]
ActionValue = Union[int, np.ndarray]


class Activation(Enum):
    TANH = "tanh"
    RELU = "relu"
    LINEAR = "linear"


class HeadKind(Enum):
    CATEGORICAL = "categorical"
    GAUSSIAN = "gaussian"


class LossKind(Enum):
    CLIPPED_SURROGATE = "clipped-surrogate"
    VALUE_MSE = "value-mse"


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_sizes: Tuple[int, ...] = HIDDEN_SIZES
    activation: Activation = Activation.TANH

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        dims = (self.input_dim, *self.hidden_sizes, self.output_dim)
        if any(d < 1 for d in dims):
            raise DomainError(f"all layer sizes must be at least 1, got {dims}")

    @property
    def layer_dims(self) -> Tuple[Tuple[int, int], ...]:
        dims = (self.input_dim, *self.hidden_sizes, self.output_dim)
        return tuple(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class PolicyHead:
    """Categorical over `dim` actions, or a diagonal Gaussian over `dim` controls in [low, high]."""

    kind: HeadKind
    dim: int
    low: float = -1.0
    high: float = 1.0

    @property
    def logits_dim(self) -> int:
        return self.dim if self.kind is HeadKind.CATEGORICAL else 2 * self.dim


@dataclass(frozen=True)
class ParamLayout:
    entries: Tuple[Tuple[str, Shape], ...]

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.entries)

    def slices(self) -> Iterator[Tuple[str, Shape, slice]]:
        offset = 0
        for name, shape in self.entries:
            count = int(np.prod(shape))
            yield name, shape, slice(offset, offset + count)
            offset += count

    def unpack(self, data: np.ndarray) -> Dict[str, np.ndarray]:
        return {name: data[part].reshape(shape) for name, shape, part in self.slices()}

    def to_json(self) -> list:
        return [[name, list(shape)] for name, shape in self.entries]

    @classmethod
    def from_json(cls, entries: list) -> "ParamLayout":
        return cls(tuple((str(name), tuple(int(d) for d in shape)) for name, shape in entries))


@dataclass
class ParamVector:
    data: np.ndarray
    layout: ParamLayout

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.layout.size,):
            raise DomainError(f"parameter vector has shape {self.data.shape}, layout needs ({self.layout.size},)")
        if not np.all(np.isfinite(self.data)):
            raise DomainError("parameter vector has non-finite entries")

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.data), self.layout)

    def views(self) -> Dict[str, np.ndarray]:
        return self.layout.unpack(self.data)


def network_layout(spec: MlpSpec, head: Optional[PolicyHead] = None) -> ParamLayout:
    entries = []
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        entries.append((f"W{i}", (fan_out, fan_in)))
        entries.append((f"b{i}", (fan_out,)))
    if head is not None and head.kind is HeadKind.GAUSSIAN:
        entries.append(("log_std", (head.dim,)))
    return ParamLayout(tuple(entries))


def init_params(
    spec: MlpSpec, rng: np.random.Generator, head: Optional[PolicyHead] = None, output_gain: float = 1.0
) -> ParamVector:
    """Scaled-normal weights, zero biases, zero log-std; the output layer is scaled by `output_gain`."""
    layout = network_layout(spec, head)
    data = np.zeros(layout.size)
    views = layout.unpack(data)
    n_layers = len(spec.layer_dims)
    for i, (fan_in, _) in enumerate(spec.layer_dims):
        gain = output_gain if i == n_layers - 1 else 1.0
        weights = views[f"W{i}"]
        weights[...] = rng.normal(0.0, gain / math.sqrt(fan_in), size=weights.shape)
    return ParamVector(data, layout)


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.TANH:
        return np.tanh(z)
    if activation is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, activation: Activation) -> np.ndarray:
    if activation is Activation.TANH:
        return 1.0 - a * a
    if activation is Activation.RELU:
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


def _as_batch(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    batch = x.reshape(1, -1) if x.ndim == 1 else x
    if batch.ndim != 2 or batch.shape[1] != spec.input_dim:
        raise DomainError(f"input has shape {x.shape}, network expects {spec.input_dim} features")
    return batch


def _forward_cached(params: ParamVector, spec: MlpSpec, x: np.ndarray):
    views = params.views()
    activations = [x]
    pre = []
    a = x
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        z = a @ views[f"W{i}"].T + views[f"b{i}"]
        pre.append(z)
        a = z if i == n_layers - 1 else _activate(z, spec.activation)
        activations.append(a)
    return a, pre, activations


def forward(params: ParamVector, spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    """Network output for one input vector (returns a vector) or a batch of rows (returns a matrix)."""
    batch = _as_batch(spec, x)
    out, _, _ = _forward_cached(params, spec, batch)
    return out[0] if np.asarray(x).ndim == 1 else out


def _backprop(params: ParamVector, spec: MlpSpec, pre, activations, grad_out: np.ndarray) -> np.ndarray:
    views = params.views()
    grad = np.zeros_like(params.data)
    grad_views = params.layout.unpack(grad)
    delta = grad_out
    for i in reversed(range(len(spec.layer_dims))):
        grad_views[f"W{i}"][...] = delta.T @ activations[i]
        grad_views[f"b{i}"][...] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ views[f"W{i}"]) * _activation_grad(pre[i - 1], activations[i], spec.activation)
    return grad


def policy_logits(params: ParamVector, spec: MlpSpec, head: PolicyHead, x: np.ndarray) -> np.ndarray:
    """Distribution parameters per row: categorical logits, or [mean, log_std] for a Gaussian head."""
    out = forward(params, spec, x)
    if head.kind is HeadKind.CATEGORICAL:
        return out
    log_std = np.broadcast_to(params.views()["log_std"], out.shape)
    return np.concatenate([out, log_std], axis=-1)


def _check_logits(head: PolicyHead, logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[-1] != head.logits_dim:
        raise DomainError(f"logits have {logits.shape[-1]} entries, head expects {head.logits_dim}")
    if not np.all(np.isfinite(logits)):
        raise DomainError("logits must be finite")
    return logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _split_gaussian(head: PolicyHead, logits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return logits[..., : head.dim], logits[..., head.dim :]


def log_prob(head: PolicyHead, logits: np.ndarray, action) -> np.ndarray:
    """Exact log-density of `action` (one per row of `logits`)."""
    logits = _check_logits(head, logits)
    if head.kind is HeadKind.CATEGORICAL:
        log_p = _log_softmax(logits)
        index = np.asarray(action, dtype=np.int64)
        if log_p.ndim == 1:
            return log_p[int(index)]
        return np.take_along_axis(log_p, index.reshape(-1, 1), axis=1)[:, 0]
    mean, log_std = _split_gaussian(head, logits)
    z = (np.asarray(action, dtype=np.float64) - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def entropy(head: PolicyHead, logits: np.ndarray) -> np.ndarray:
    logits = _check_logits(head, logits)
    if head.kind is HeadKind.CATEGORICAL:
        log_p = _log_softmax(logits)
        return -np.sum(np.exp(log_p) * log_p, axis=-1)
    _, log_std = _split_gaussian(head, logits)
    return np.sum(log_std + 0.5 + 0.5 * LOG_2PI, axis=-1)


def sample(head: PolicyHead, logits: np.ndarray, rng: np.random.Generator) -> ActionValue:
    """Draw one action for a single row of logits. Gaussian samples are returned unclipped."""
    logits = _check_logits(head, logits)
    if head.kind is HeadKind.CATEGORICAL:
        probs = np.exp(_log_softmax(logits))
        index = int(np.searchsorted(np.cumsum(probs), rng.random(), side="right"))
        return min(index, head.dim - 1)
    mean, log_std = _split_gaussian(head, logits)
    return mean + np.exp(log_std) * rng.standard_normal(head.dim)


def greedy(head: PolicyHead, logits: np.ndarray) -> ActionValue:
    logits = _check_logits(head, logits)
    if head.kind is HeadKind.CATEGORICAL:
        return int(np.argmax(logits))
    mean, _ = _split_gaussian(head, logits)
    return clip_action(head, mean)


def clip_action(head: PolicyHead, action: ActionValue) -> ActionValue:
    if head.kind is HeadKind.CATEGORICAL:
        return action
    return np.clip(action, head.low, head.high)


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind
    clip_epsilon: float = 0.2
    entropy_coef: float = 0.0


@dataclass
class Batch:
    obs: np.ndarray
    actions: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    old_log_probs: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.obs)

    def subset(self, index: np.ndarray) -> "Batch":
        def pick(array: Optional[np.ndarray]) -> Optional[np.ndarray]:
            return None if array is None else array[index]

        return Batch(
            obs=self.obs[index],
            actions=pick(self.actions),
            advantages=pick(self.advantages),
            old_log_probs=pick(self.old_log_probs),
            targets=pick(self.targets),
        )


@dataclass
class LossResult:
    loss: float
    grad: ParamVector
    stats: Dict[str, float] = field(default_factory=dict)


def _surrogate(
    params: ParamVector, spec: MlpSpec, head: PolicyHead, batch: Batch, loss_spec: LossSpec
) -> LossResult:
    assert batch.actions is not None and batch.advantages is not None and batch.old_log_probs is not None
    x = _as_batch(spec, batch.obs)
    out, pre, activations = _forward_cached(params, spec, x)
    size = len(x)
    eps = loss_spec.clip_epsilon
    adv = batch.advantages

    if head.kind is HeadKind.CATEGORICAL:
        logits = out
    else:
        logits = np.concatenate([out, np.broadcast_to(params.views()["log_std"], out.shape)], axis=1)
    new_log_prob = log_prob(head, logits, batch.actions)
    ent = entropy(head, logits)
    ratio = np.exp(new_log_prob - batch.old_log_probs)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    objective = np.minimum(unclipped, clipped)
    loss = -float(objective.mean()) - loss_spec.entropy_coef * float(ent.mean())

    # d loss / d log_prob: only the unclipped branch depends on the ratio
    active = unclipped <= clipped
    d_log_prob = -np.where(active, unclipped, 0.0) / size
    d_entropy = -loss_spec.entropy_coef / size

    grad_log_std = None
    if head.kind is HeadKind.CATEGORICAL:
        log_p = _log_softmax(logits)
        probs = np.exp(log_p)
        onehot = np.zeros_like(probs)
        onehot[np.arange(size), np.asarray(batch.actions, dtype=np.int64)] = 1.0
        grad_out = d_log_prob[:, None] * (onehot - probs)
        grad_out += d_entropy * (-probs * (log_p + ent[:, None]))
    else:
        mean, log_std = _split_gaussian(head, logits)
        z = (np.asarray(batch.actions, dtype=np.float64) - mean) * np.exp(-log_std)
        grad_out = d_log_prob[:, None] * z * np.exp(-log_std)
        grad_log_std = (d_log_prob[:, None] * (z * z - 1.0)).sum(axis=0) + d_entropy * size

    grad = _backprop(params, spec, pre, activations, grad_out)
    if grad_log_std is not None:
        params.layout.unpack(grad)["log_std"][...] = grad_log_std

    log_ratio = new_log_prob - batch.old_log_probs
    stats = {
        "policy_loss": -float(objective.mean()),
        "entropy": float(ent.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
        "approx_kl": float(np.mean(np.expm1(log_ratio) - log_ratio)),
    }
    return LossResult(loss, ParamVector(grad, params.layout), stats)


def _value_mse(params: ParamVector, spec: MlpSpec, batch: Batch) -> LossResult:
    assert batch.targets is not None
    x = _as_batch(spec, batch.obs)
    out, pre, activations = _forward_cached(params, spec, x)
    error = out[:, 0] - batch.targets
    loss = 0.5 * float(np.mean(error * error))
    grad_out = (error / len(x))[:, None]
    grad = _backprop(params, spec, pre, activations, grad_out)
    return LossResult(loss, ParamVector(grad, params.layout), {"value_loss": loss})


def loss_and_grad(
    params: ParamVector, spec: MlpSpec, head: Optional[PolicyHead], batch: Batch, loss_spec: LossSpec
) -> LossResult:
    """Mean-reduced loss over `batch` and its exact gradient with respect to `params`."""
    if len(batch) == 0:
        raise DomainError("cannot differentiate over an empty batch")
    if loss_spec.kind is LossKind.VALUE_MSE:
        return _value_mse(params, spec, batch)
    if head is None:
        raise DomainError("the clipped surrogate needs a policy head")
    return _surrogate(params, spec, head, batch, loss_spec)


def backward(
    params: ParamVector, spec: MlpSpec, head: Optional[PolicyHead], batch: Batch, loss_spec: LossSpec
) -> ParamVector:
    return loss_and_grad(params, spec, head, batch, loss_spec).grad


def gradient_check(
    params: ParamVector,
    spec: MlpSpec,
    head: Optional[PolicyHead],
    batch: Batch,
    loss_spec: LossSpec,
    h: float = 1e-5,
    floor: float = 1e-4,
) -> float:
    """Largest relative error between the analytic gradient and central differences.

    Relative error is |g - fd| / max(|g|, |fd|, floor); `floor` keeps near-zero coordinates from
    dividing finite-difference noise by zero.
    """
    analytic = backward(params, spec, head, batch, loss_spec).data
    worst = 0.0
    for i in range(len(params.data)):
        plus, minus = params.copy(), params.copy()
        plus.data[i] += h
        minus.data[i] -= h
        numeric = (
            loss_and_grad(plus, spec, head, batch, loss_spec).loss - loss_and_grad(minus, spec, head, batch, loss_spec).loss
        ) / (2.0 * h)
        scale = max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, abs(analytic[i] - numeric) / scale)
    return worst


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, params: ParamVector) -> "AdamState":
        return cls(np.zeros_like(params.data), np.zeros_like(params.data), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t)


def adam_step(
    params: ParamVector,
    grad: ParamVector,
    moments: AdamState,
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> Tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update. Returns new objects; the inputs are not modified."""
    if grad.data.shape != params.data.shape or moments.m.shape != params.data.shape:
        raise DomainError("parameter, gradient and moment shapes disagree")
    beta1, beta2 = betas
    t = moments.t + 1
    m = beta1 * moments.m + (1.0 - beta1) * grad.data
    v = beta2 * moments.v + (1.0 - beta2) * grad.data * grad.data
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    data = params.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ParamVector(data, params.layout), AdamState(m, v, t)


def clip_grad_norm(grad: ParamVector, max_norm: Optional[float]) -> Tuple[ParamVector, float]:
    norm = float(np.linalg.norm(grad.data))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grad, norm
    return ParamVector(grad.data * (max_norm / norm), grad.layout), norm
