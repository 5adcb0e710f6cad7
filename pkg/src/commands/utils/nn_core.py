from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from math import sqrt

import numpy as np
from scipy.special import xlogy

from .exceptions import (FrozenParameterError, LabelRangeError, MissingStateError, NonFiniteError,
                         ShapeError)
from .misc_utils import rng_stream

logger = logging.getLogger('rpf.nn')

ACTIVATIONS = ('relu', 'tanh')

# Canonical evaluation order of loss terms. Gradients are accumulated in this order so that a
# given set of active terms always produces bitwise identical buffers.
TERMS = ('lp', 'lpft', 'fr', 'hr', 'hr_f', 'ent_min_hr')
F0_TERMS = ('lp', 'hr', 'ent_min_hr')


def _freeze(array: np.ndarray) -> np.ndarray:
    frozen = array.copy()
    frozen.flags.writeable = False
    return frozen


@dataclass
class MlpParams:
    """
    Dense feature extractor. Layer i maps in_i -> out_i with W_i of shape (out_i, in_i)
    and the activation is applied after every layer
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = 'relu'

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f'Unknown activation {self.activation!r}, expected one of {ACTIVATIONS}')
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeError('An MLP needs at least one layer and one bias per weight matrix')

        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            if weight.ndim != 2 or bias.shape != (weight.shape[0],):
                raise ShapeError(f'Layer {i}: weight {weight.shape} does not match bias {bias.shape}')
            if i and weight.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f'Layer {i} expects {weight.shape[1]} inputs, '
                                 f'layer {i - 1} produces {self.weights[i - 1].shape[0]}')
            if not (np.isfinite(weight).all() and np.isfinite(bias).all()):
                raise NonFiniteError(f'Layer {i} holds non-finite parameters')

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [weight.shape for weight in self.weights]

    @property
    def frozen(self) -> bool:
        return not self.weights[0].flags.writeable

    def buffers(self) -> list[np.ndarray]:
        """
        Returns
        ----------
        list[np.ndarray]: The parameter buffers in the order W0, b0, W1, b1, ...
        """

        return [buffer for layer in zip(self.weights, self.biases) for buffer in layer]

    def num_parameters(self) -> int:
        return sum(buffer.size for buffer in self.buffers())

    def copy(self) -> MlpParams:
        """Writable deep copy, also used to thaw a frozen snapshot"""

        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def freeze(self) -> MlpParams:
        """Read-only deep copy. Any in-place write to it raises"""

        return MlpParams([_freeze(w) for w in self.weights], [_freeze(b) for b in self.biases], self.activation)


@dataclass
class HeadParams:
    """Linear C-way classifier, logits = features @ W.T + b"""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ShapeError(f'Head weight {self.W.shape} does not match bias {self.b.shape}')
        if not (np.isfinite(self.W).all() and np.isfinite(self.b).all()):
            raise NonFiniteError('Head holds non-finite parameters')

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    @property
    def frozen(self) -> bool:
        return not self.W.flags.writeable

    def buffers(self) -> list[np.ndarray]:
        return [self.W, self.b]

    def augmented(self) -> np.ndarray:
        """[W | b], one row per class"""

        return np.concatenate([self.W, self.b[:, None]], axis=1)

    def copy(self) -> HeadParams:
        return HeadParams(self.W.copy(), self.b.copy())

    def freeze(self) -> HeadParams:
        return HeadParams(_freeze(self.W), _freeze(self.b))


class ModelState:
    """
    Trainable feature extractor f and head h, plus the frozen snapshots f0 and h_lp.
    The snapshots can be set exactly once and are stored read-only
    """

    def __init__(self, f: MlpParams, h: HeadParams, f0: MlpParams | None = None, h_lp: HeadParams | None = None):
        if f.feature_dim != h.feature_dim:
            raise ShapeError(f'Feature width {f.feature_dim} does not match head width {h.feature_dim}')

        self.f = f
        self.h = h
        self._f0 = None
        self._h_lp = None
        if f0 is not None:
            self.f0 = f0
        if h_lp is not None:
            self.h_lp = h_lp

    @property
    def f0(self) -> MlpParams | None:
        return self._f0

    @f0.setter
    def f0(self, params: MlpParams):
        if self._f0 is not None:
            raise FrozenParameterError('f0 is already set and cannot be replaced')
        self._f0 = params if params.frozen else params.freeze()

    @property
    def h_lp(self) -> HeadParams | None:
        return self._h_lp

    @h_lp.setter
    def h_lp(self, params: HeadParams):
        if self._h_lp is not None:
            raise FrozenParameterError('h_lp is already set and cannot be replaced')
        self._h_lp = params if params.frozen else params.freeze()

    def trainable_buffers(self) -> list[np.ndarray]:
        return [*self.f.buffers(), *self.h.buffers()]

    def copy(self) -> ModelState:
        """Copies the trainable parameters; the frozen snapshots are shared since nothing can write to them"""

        state = ModelState(self.f.copy(), self.h.copy())
        state._f0 = self._f0
        state._h_lp = self._h_lp
        return state


@dataclass
class GradSet:
    """One gradient buffer per trainable buffer of (f, h), plus the loss they were taken of"""

    f_weights: list[np.ndarray]
    f_biases: list[np.ndarray]
    h_W: np.ndarray
    h_b: np.ndarray
    loss: float = 0.0
    components: dict[str, float] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, state: ModelState) -> GradSet:
        return cls(
            f_weights=[np.zeros_like(w) for w in state.f.weights],
            f_biases=[np.zeros_like(b) for b in state.f.biases],
            h_W=np.zeros_like(state.h.W),
            h_b=np.zeros_like(state.h.b)
        )

    def f_buffers(self) -> list[np.ndarray]:
        return [buffer for layer in zip(self.f_weights, self.f_biases) for buffer in layer]

    def h_buffers(self) -> list[np.ndarray]:
        return [self.h_W, self.h_b]

    def buffers(self) -> list[np.ndarray]:
        """Same order as ModelState.trainable_buffers"""

        return [*self.f_buffers(), *self.h_buffers()]


@dataclass
class OptimizerState:
    """
    Plain SGD with a single step decay milestone.
    grad_clip rescales the whole gradient to that global L2 norm when it is exceeded
    """

    learning_rate: float
    decay_epoch: int
    decay_factor: float = 0.1
    epoch_counter: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip: float | None = None
    velocity: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ShapeError(f'Learning rate must be >= 0, got {self.learning_rate}')
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ShapeError(f'grad_clip must be > 0, got {self.grad_clip}')

    @property
    def passed_milestones(self) -> int:
        return int(self.epoch_counter >= self.decay_epoch)

    @property
    def effective_lr(self) -> float:
        return self.learning_rate * self.decay_factor ** self.passed_milestones

    def next_epoch(self) -> None:
        self.epoch_counter += 1


@dataclass
class Batch:
    """
    A mini-batch of source samples. f0_features caches the frozen extractor's output,
    which never changes during fine-tuning
    """

    x: np.ndarray
    y: np.ndarray
    f0_features: np.ndarray | None = None


@dataclass
class FdReport:
    max_rel_err: float
    passed: bool
    checked: int
    worst: tuple[int, int] | None = None


def init_mlp(dims: Sequence[int], seed: int, activation: str = 'relu', stream: str = 'f') -> MlpParams:
    """
    Initialises an MLP with weights and biases uniform in [-s, s], s = sqrt(1 / fan_in).
    Each layer draws from its own named stream

    Parameters
    ----------
    dims (Sequence[int]): Layer widths, input first, feature width last
    seed (int): Root seed
    activation (str): relu or tanh
    stream (str): Name of the init stream

    Returns
    ----------
    MlpParams: The freshly initialised network
    """

    if len(dims) < 2:
        raise ShapeError(f'An MLP needs an input and an output width, got {list(dims)}')

    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        rng = rng_stream(seed, 'init', stream, i)
        scale = sqrt(1 / fan_in)
        weights.append(rng.uniform(-scale, scale, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-scale, scale, size=fan_out))

    return MlpParams(weights, biases, activation)


def init_head(num_classes: int, feature_dim: int, seed: int, stream: str = 'head') -> HeadParams:
    """Same init rule as init_mlp for a single linear layer"""

    rng = rng_stream(seed, 'init', stream)
    scale = sqrt(1 / feature_dim)
    return HeadParams(rng.uniform(-scale, scale, size=(num_classes, feature_dim)),
                      rng.uniform(-scale, scale, size=num_classes))


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'relu':
        return np.maximum(pre, 0.0)
    return np.tanh(pre)


def _activation_grad(pre: np.ndarray, out: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'relu':
        return (pre > 0).astype(np.float64)
    return 1.0 - out * out


def _as_rows(x: np.ndarray, width: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f'{what} expects {width} columns, got shape {x.shape}')
    return x, single


def _mlp_forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    cache = []
    out = x
    for weight, bias in zip(params.weights, params.biases):
        pre = out @ weight.T + bias
        post = _activate(pre, params.activation)
        cache.append((out, pre, post))
        out = post
    return out, cache


def _mlp_backward(params: MlpParams, cache: list, grad_out: np.ndarray) -> tuple[list, list]:
    grad_weights, grad_biases = [None] * len(cache), [None] * len(cache)
    for i in reversed(range(len(cache))):
        inputs, pre, post = cache[i]
        grad_pre = grad_out * _activation_grad(pre, post, params.activation)
        grad_weights[i] = grad_pre.T @ inputs
        grad_biases[i] = grad_pre.sum(axis=0)
        grad_out = grad_pre @ params.weights[i]
    return grad_weights, grad_biases


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """
    Computes f(x)

    Parameters
    ----------
    params (MlpParams): The feature extractor
    x (np.ndarray): Inputs of shape (batch, in), or a single input of shape (in,)

    Returns
    ----------
    np.ndarray: Features of shape (batch, d), or (d,) for a single input
    """

    rows, single = _as_rows(x, params.input_dim, 'mlp_forward')
    out, _ = _mlp_forward_cached(params, rows)
    return out[0] if single else out


def head_forward(h: HeadParams, features: np.ndarray) -> np.ndarray:
    """
    Computes logits = features @ W.T + b

    Parameters
    ----------
    h (HeadParams): The head
    features (np.ndarray): Features of shape (batch, d) or (d,)

    Returns
    ----------
    np.ndarray: Logits of shape (batch, C) or (C,)
    """

    rows, single = _as_rows(features, h.feature_dim, 'head_forward')
    logits = rows @ h.W.T + h.b
    return logits[0] if single else logits


def softmax(z: np.ndarray) -> np.ndarray:
    """
    Row-wise softmax with max subtraction

    Parameters
    ----------
    z (np.ndarray): Logits of shape (C,) or (batch, C)

    Returns
    ----------
    np.ndarray: Probabilities with the same shape
    """

    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NonFiniteError('softmax received non-finite logits')

    shifted = z - z.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NonFiniteError('log_softmax received non-finite logits')

    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def negative_entropy(probs: np.ndarray) -> np.ndarray:
    """sum_c p_c log p_c per row, with 0 log 0 = 0"""

    return xlogy(probs, probs).sum(axis=-1)


def _check_labels(labels: np.ndarray, num_classes: int, batch_size: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch_size,):
        raise ShapeError(f'Expected {batch_size} labels, got shape {labels.shape}')
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelRangeError(f'Labels must lie in [0, {num_classes}), got [{labels.min()}, {labels.max()}]')
    return labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """
    Batch-mean cross-entropy

    Parameters
    ----------
    logits (np.ndarray): Logits of shape (batch, C)
    labels (np.ndarray): Class indices of shape (batch,)

    Returns
    ----------
    float: mean of -log softmax(logits)[label]
    """

    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    log_probs = log_softmax(logits)
    return float(-log_probs[np.arange(len(labels)), labels].mean())


def _cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    log_probs = log_softmax(logits)
    rows = np.arange(len(labels))
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return float(-log_probs[rows, labels].mean()), grad / len(labels)


def _negative_entropy_grad(logits: np.ndarray) -> tuple[float, np.ndarray]:
    probs = softmax(logits)
    per_row = negative_entropy(probs)
    grad = xlogy(probs, probs) - probs * per_row[:, None]
    return float(per_row.mean()), grad / len(logits)


def resolve_coefficients(loss_spec) -> dict[str, float]:
    """
    Normalises a loss spec into {term: coefficient} in canonical term order.
    Accepts a mapping or anything with a coefficients() method (losses.LossSpec)
    """

    raw = loss_spec.coefficients() if hasattr(loss_spec, 'coefficients') else dict(loss_spec or {})
    unknown = set(raw) - set(TERMS)
    if unknown:
        raise ShapeError(f'Unknown loss terms: {sorted(unknown)}')
    return {term: float(raw[term]) for term in TERMS if term in raw}


def _evaluate(
    state: ModelState,
    batch: Batch,
    loss_spec,
    prototypes: np.ndarray | None,
    with_grad: bool,
    detached_features: np.ndarray | None = None
) -> tuple[float, dict[str, float], GradSet | None]:
    coefficients = {term: coef for term, coef in resolve_coefficients(loss_spec).items() if coef != 0.0}

    if any(term in F0_TERMS for term in coefficients) and state.f0 is None:
        raise MissingStateError('The active loss terms need f0, which has not been set')
    if 'fr' in coefficients and prototypes is None:
        raise MissingStateError('L_fr is active but no prototype bank has been computed')
    if getattr(loss_spec, 'requires_probe_head', False) and state.h_lp is None:
        raise MissingStateError('This variant starts from h_lp, which has not been set (run linear probing first)')

    x, _ = _as_rows(batch.x, state.f.input_dim, 'batch')
    labels = batch.y
    batch_size = len(x)

    features = cache = f0_features = None
    if any(term in ('lpft', 'fr', 'hr_f') for term in coefficients):
        features, cache = _mlp_forward_cached(state.f, x)
    if any(term in F0_TERMS for term in coefficients):
        f0_features = batch.f0_features if batch.f0_features is not None else mlp_forward(state.f0, x)

    grads = GradSet.zeros_like(state) if with_grad else None
    grad_features = np.zeros((batch_size, state.f.feature_dim)) if with_grad and features is not None else None
    touches_f = False
    total = 0.0
    components = {}

    for term, coef in coefficients.items():
        if term in ('lp', 'lpft'):
            inputs = f0_features if term == 'lp' else features
            value, grad_logits = _cross_entropy_grad(head_forward(state.h, inputs), labels)
        elif term == 'fr':
            labels_checked = _check_labels(labels, len(prototypes), batch_size)
            diff = features - prototypes[labels_checked]
            value = float((diff * diff).sum(axis=1).mean())
            grad_logits = None
        else:
            if term == 'hr_f':
                inputs = detached_features if detached_features is not None else features
            else:
                inputs = f0_features
            value, grad_logits = _negative_entropy_grad(head_forward(state.h, inputs))
            if term == 'ent_min_hr':
                value, grad_logits = -value, -grad_logits

        components[term] = value
        total += coef * value

        if not with_grad:
            continue

        if term == 'fr':
            grad_features += (coef * 2.0 / batch_size) * diff
            touches_f = True
            continue

        # Every remaining term updates the head through the features it was evaluated on
        grads.h_W += coef * (grad_logits.T @ inputs)
        grads.h_b += coef * grad_logits.sum(axis=0)
        if term == 'lpft':
            grad_features += coef * (grad_logits @ state.h.W)
            touches_f = True

    if with_grad:
        if touches_f:
            grads.f_weights, grads.f_biases = _mlp_backward(state.f, cache, grad_features)
        grads.loss = total
        grads.components = components

    return total, components, grads


def loss_value(
    state: ModelState,
    batch: Batch,
    loss_spec,
    prototypes: np.ndarray | None = None,
    detached_features: np.ndarray | None = None
) -> tuple[float, dict[str, float]]:
    """
    Forward-only evaluation of a weighted sum of loss terms

    Returns
    ----------
    tuple[float, dict[str, float]]: The total and the unweighted value of every active term
    """

    total, components, _ = _evaluate(state, batch, loss_spec, prototypes, False, detached_features)
    return total, components


def compute_gradients(state: ModelState, batch: Batch, loss_spec, prototypes: np.ndarray | None = None) -> GradSet:
    """
    Exact gradients of the weighted loss w.r.t. every trainable parameter.

    Routing: L_fr only reaches f, every entropy term only reaches h, L_lp only reaches h
    and L_lp-ft reaches both. f0, h_lp and the prototypes never receive gradients

    Parameters
    ----------
    state (ModelState): The model
    batch (Batch): Source mini-batch
    loss_spec (LossSpec | Mapping[str, float]): Active terms and their coefficients
    prototypes (np.ndarray): Prototype rows, required when L_fr is active

    Returns
    ----------
    GradSet: Gradients, total loss and per-term values
    """

    _, _, grads = _evaluate(state, batch, loss_spec, prototypes, True)
    return grads


def grad_norm(buffers: Sequence[np.ndarray]) -> float:
    """Global L2 norm over every buffer"""

    return float(np.sqrt(sum(float(np.vdot(buffer, buffer)) for buffer in buffers)))


def sgd_step(state: ModelState, grads: GradSet, opt: OptimizerState) -> ModelState:
    """
    p <- p - lr_effective * g for every trainable buffer, in place. Frozen snapshots are never touched.
    With opt.grad_clip set, g is first scaled down so its global norm is at most grad_clip

    Returns
    ----------
    ModelState: The same state object, updated
    """

    params = state.trainable_buffers()
    gradients = grads.buffers()
    if len(params) != len(gradients) or any(p.shape != g.shape for p, g in zip(params, gradients)):
        raise ShapeError('Gradient buffers do not match the trainable parameters')

    if opt.grad_clip is not None:
        norm = grad_norm(gradients)
        if norm > opt.grad_clip:
            gradients = [grad * (opt.grad_clip / norm) for grad in gradients]

    lr = opt.effective_lr
    if opt.momentum and opt.velocity is None:
        opt.velocity = [np.zeros_like(p) for p in params]

    for i, (param, grad) in enumerate(zip(params, gradients)):
        if opt.weight_decay:
            grad = grad + opt.weight_decay * param
        if opt.momentum:
            opt.velocity[i] *= opt.momentum
            opt.velocity[i] += grad
            grad = opt.velocity[i]
        param -= lr * grad

    return state


def finite_difference_check(
    state: ModelState,
    batch: Batch,
    loss_spec,
    step: float = 1e-5,
    tol: float = 1e-4,
    prototypes: np.ndarray | None = None,
    grads: GradSet | None = None,
    max_parameters: int = 10_000,
    seed: int = 0,
    floor: float = 1e-6
) -> FdReport:
    """
    Compares analytic gradients with central differences on every trainable scalar, or on a seeded
    random subsample when there are more than max_parameters of them.

    Stop-gradient inputs are held fixed while perturbing, so the numeric gradient obeys the same
    routing as the analytic one

    Parameters
    ----------
    step (float): Central difference step
    tol (float): Pass threshold on the max relative error
    grads (GradSet): Gradients to check. Computed from the state when omitted
    floor (float): Lower bound of the relative error denominator

    Returns
    ----------
    FdReport: Max relative error, verdict, number of checked scalars and the worst (buffer, index)
    """

    if step <= 0:
        raise ShapeError(f'Finite difference step must be > 0, got {step}')

    if grads is None:
        grads = compute_gradients(state, batch, loss_spec, prototypes)

    detached = None
    if 'hr_f' in resolve_coefficients(loss_spec):
        detached = mlp_forward(state.f, batch.x)

    params = state.trainable_buffers()
    analytic = grads.buffers()
    positions = [(i, j) for i, param in enumerate(params) for j in range(param.size)]
    if len(positions) > max_parameters:
        rng = rng_stream(seed, 'fd-check')
        chosen = np.sort(rng.choice(len(positions), size=max_parameters, replace=False))
        positions = [positions[k] for k in chosen]

    max_rel_err, worst = 0.0, None
    for i, j in positions:
        original = params[i].flat[j]
        params[i].flat[j] = original + step
        plus, _ = loss_value(state, batch, loss_spec, prototypes, detached)
        params[i].flat[j] = original - step
        minus, _ = loss_value(state, batch, loss_spec, prototypes, detached)
        params[i].flat[j] = original

        numeric = (plus - minus) / (2 * step)
        exact = analytic[i].flat[j]
        rel_err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        if rel_err > max_rel_err:
            max_rel_err, worst = rel_err, (i, j)

    passed = max_rel_err < tol
    logger.debug(f'Gradient check over {len(positions)} scalars: max relative error {max_rel_err:.3e}')
    return FdReport(max_rel_err=max_rel_err, passed=passed, checked=len(positions), worst=worst)
