"""From-scratch multilayer perceptron: fan-in-scaled init, forward with
inverted dropout, softmax cross-entropy, backprop, and Adam with decoupled
weight decay. Parameters are stored in float32; reductions run in float64.
A float64 mode exists for gradient checking.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BAD_MAGIC, BAD_VERSION, TRUNCATED, DataFormatError
from .rng import TAG_INIT, derive_rng

MLP1_MAGIC = b"MLP1"
MLP1_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


class CacheMismatchError(ValueError):
    """Backward called with a cache that does not match the model."""


@dataclass
class LayerParams:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray   # (out,)

    @property
    def out_dim(self) -> int:
        return int(self.weights.shape[0])

    @property
    def in_dim(self) -> int:
        return int(self.weights.shape[1])


@dataclass
class MlpModel:
    layers: list[LayerParams]
    input_dim: int
    hidden_dim: int
    num_hidden_layers: int
    output_dim: int

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weights.dtype


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    dropout_rate: float = 0.2
    batch_size: int = 256
    epochs: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be positive, got {self.epochs}")


@dataclass
class AdamState:
    first_moment: list[LayerParams]
    second_moment: list[LayerParams]
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON


def layer_shapes(input_dim: int, hidden_dim: int, num_hidden_layers: int, output_dim: int) -> list[tuple[int, int]]:
    """(out, in) shape chain: input -> hidden x N -> output."""
    dims = [input_dim] + [hidden_dim] * num_hidden_layers + [output_dim]
    return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


def init_model(
    input_dim: int,
    hidden_dim: int,
    num_hidden_layers: int,
    output_dim: int,
    seed: int,
    dtype=np.float32,
) -> MlpModel:
    """Weights uniform in ±sqrt(6/(fan_in+fan_out)), biases zero; the draw
    order is fixed so a seed reproduces parameters bit-exactly."""
    for name, val in (
        ("input_dim", input_dim),
        ("hidden_dim", hidden_dim),
        ("num_hidden_layers", num_hidden_layers),
        ("output_dim", output_dim),
    ):
        if val < 1:
            raise ValueError(f"{name} must be >= 1, got {val}")
    rng = derive_rng(seed, TAG_INIT)
    layers = []
    for out_dim, in_dim in layer_shapes(input_dim, hidden_dim, num_hidden_layers, output_dim):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        w = rng.uniform(-limit, limit, size=(out_dim, in_dim)).astype(dtype)
        b = np.zeros(out_dim, dtype=dtype)
        layers.append(LayerParams(w, b))
    return MlpModel(layers, input_dim, hidden_dim, num_hidden_layers, output_dim)


def count_parameters(model: MlpModel) -> int:
    return sum(l.weights.size + l.biases.size for l in model.layers)


@dataclass
class ForwardCache:
    """Activations and masks retained for the backward pass."""

    layer_inputs: list[np.ndarray] = field(default_factory=list)  # input to each affine
    relu_masks: list[np.ndarray] = field(default_factory=list)    # per hidden layer
    dropout_masks: list[np.ndarray | None] = field(default_factory=list)
    dropout_rate: float = 0.0
    training: bool = False


def forward(
    model: MlpModel,
    batch: np.ndarray,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    """Hidden layers apply affine -> ReLU -> inverted dropout (training
    only); the output layer is affine. Returns (logits, cache)."""
    batch = np.asarray(batch, dtype=model.dtype)
    if batch.ndim != 2 or batch.shape[1] != model.input_dim:
        raise ValueError(
            f"batch must be (n, {model.input_dim}), got shape {batch.shape}"
        )
    use_dropout = training and dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("training-mode dropout requires an rng")
    cache = ForwardCache(dropout_rate=dropout_rate, training=training)
    act = batch
    for layer in model.layers[:-1]:
        cache.layer_inputs.append(act)
        pre = act @ layer.weights.T + layer.biases
        relu_mask = pre > 0
        act = pre * relu_mask
        cache.relu_masks.append(relu_mask)
        if use_dropout:
            keep = rng.random(act.shape) >= dropout_rate
            act = act * keep / (1.0 - dropout_rate)
            cache.dropout_masks.append(keep)
        else:
            cache.dropout_masks.append(None)
    cache.layer_inputs.append(act)
    out = model.layers[-1]
    logits = act @ out.weights.T + out.biases
    return logits, cache


def loss_softmax_xent(logits: np.ndarray, label_ids: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy with a stable log-sum-exp, plus the logit
    gradient (softmax - onehot) / batch_size."""
    logits = np.asarray(logits)
    labels = np.asarray(label_ids)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must be ({n},), got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label ids must be within [0, {c})")
    z = logits.astype(np.float64)
    z_max = z.max(axis=1, keepdims=True)
    shifted = z - z_max
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(sum_exp)
    loss = float(-log_probs[np.arange(n), labels].mean())
    probs = exp / sum_exp
    probs[np.arange(n), labels] -= 1.0
    dlogits = (probs / n).astype(logits.dtype)
    return loss, dlogits


def backward(model: MlpModel, cache: ForwardCache, dlogits: np.ndarray) -> list[LayerParams]:
    """Gradients for every weight and bias, same shapes as the parameters."""
    n_layers = len(model.layers)
    if len(cache.layer_inputs) != n_layers or len(cache.relu_masks) != n_layers - 1:
        raise CacheMismatchError(
            f"cache built for {len(cache.layer_inputs)} layers, model has {n_layers}"
        )
    for layer, inp in zip(model.layers, cache.layer_inputs):
        if inp.shape[1] != layer.in_dim:
            raise CacheMismatchError(
                f"cached activation dim {inp.shape[1]} does not match layer input dim {layer.in_dim}"
            )
    dlogits = np.asarray(dlogits, dtype=model.dtype)
    if dlogits.shape != (cache.layer_inputs[0].shape[0], model.output_dim):
        raise CacheMismatchError(
            f"dlogits shape {dlogits.shape} does not match cache batch/output dims"
        )

    grads: list[LayerParams] = [None] * n_layers  # type: ignore[list-item]
    delta = dlogits
    for i in range(n_layers - 1, -1, -1):
        layer = model.layers[i]
        inp = cache.layer_inputs[i]
        grads[i] = LayerParams(delta.T @ inp, delta.sum(axis=0))
        if i == 0:
            break
        delta = delta @ layer.weights
        keep = cache.dropout_masks[i - 1]
        if keep is not None:
            delta = delta * keep / (1.0 - cache.dropout_rate)
        delta = delta * cache.relu_masks[i - 1]
    return grads


def init_adam(
    model: MlpModel,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    epsilon: float = ADAM_EPSILON,
) -> AdamState:
    zeros = lambda l: LayerParams(
        np.zeros_like(l.weights, dtype=np.float64),
        np.zeros_like(l.biases, dtype=np.float64),
    )
    return AdamState(
        first_moment=[zeros(l) for l in model.layers],
        second_moment=[zeros(l) for l in model.layers],
        step_count=0,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def _adam_update(param, grad, m, v, state: AdamState, lr: float, wd: float, t: int,
                 coupled: bool):
    g = grad.astype(np.float64)
    if wd > 0.0:
        if coupled:
            g = g + wd * param.astype(np.float64)
        else:
            param -= (lr * wd * param).astype(param.dtype)
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype)


def adam_step(
    model: MlpModel,
    state: AdamState,
    grads: list[LayerParams],
    learning_rate: float,
    weight_decay: float = 0.0,
    coupled_weight_decay: bool = False,
) -> None:
    """One bias-corrected Adam step, in place. Weight decay defaults to the
    decoupled form (parameters shrink by lr*wd before the Adam delta);
    `coupled_weight_decay` folds wd*param into the gradient instead, for
    sensitivity checks."""
    if learning_rate <= 0:
        raise ValueError(f"learning_rate must be positive, got {learning_rate}")
    if len(grads) != len(model.layers):
        raise ValueError(f"{len(grads)} gradient layers for {len(model.layers)} model layers")
    state.step_count += 1
    t = state.step_count
    for layer, grad, m, v in zip(model.layers, grads, state.first_moment, state.second_moment):
        _adam_update(layer.weights, grad.weights, m.weights, v.weights, state,
                     learning_rate, weight_decay, t, coupled_weight_decay)
        _adam_update(layer.biases, grad.biases, m.biases, v.biases, state,
                     learning_rate, weight_decay, t, coupled_weight_decay)


def predict(model: MlpModel, batch: np.ndarray) -> np.ndarray:
    """Argmax over eval-mode logits; ties break toward the lowest label id."""
    logits, _ = forward(model, batch, training=False)
    return np.argmax(logits, axis=1)


def serialize_checkpoint(model: MlpModel) -> bytes:
    """MLP1 parameter block: magic, version u32, layer count u32, then per
    layer (out u32, in u32, row-major float32 weights, float32 biases),
    all little-endian."""
    parts = [MLP1_MAGIC, struct.pack("<II", MLP1_VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<II", layer.out_dim, layer.in_dim))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.biases, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: MlpModel, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize_checkpoint(model))


def deserialize_checkpoint(blob: bytes) -> MlpModel:
    return _parse_checkpoint(memoryview(blob))


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as f:
        blob = f.read()
    return _parse_checkpoint(memoryview(blob))


def _parse_checkpoint(mv: memoryview) -> MlpModel:
    if len(mv) < 12:
        raise DataFormatError(TRUNCATED, "checkpoint shorter than its header")
    if bytes(mv[:4]) != MLP1_MAGIC:
        raise DataFormatError(BAD_MAGIC, f"expected magic {MLP1_MAGIC!r}, got {bytes(mv[:4])!r}")
    version, n_layers = struct.unpack("<II", mv[4:12])
    if version != MLP1_VERSION:
        raise DataFormatError(BAD_VERSION, f"unsupported checkpoint version {version}")
    offset = 12
    layers = []
    for i in range(n_layers):
        if len(mv) < offset + 8:
            raise DataFormatError(TRUNCATED, f"checkpoint truncated in layer {i} header")
        out_dim, in_dim = struct.unpack("<II", mv[offset:offset + 8])
        offset += 8
        n_bytes = 4 * (out_dim * in_dim + out_dim)
        if len(mv) < offset + n_bytes:
            raise DataFormatError(TRUNCATED, f"checkpoint truncated in layer {i} parameters")
        w = np.frombuffer(mv, dtype="<f4", count=out_dim * in_dim, offset=offset).reshape(out_dim, in_dim)
        offset += 4 * out_dim * in_dim
        b = np.frombuffer(mv, dtype="<f4", count=out_dim, offset=offset)
        offset += 4 * out_dim
        layers.append(LayerParams(w.copy(), b.copy()))
    if offset != len(mv):
        raise DataFormatError(TRUNCATED, f"{len(mv) - offset} unexpected trailing bytes")
    if not layers:
        raise DataFormatError(TRUNCATED, "checkpoint contains no layers")
    input_dim = layers[0].in_dim
    output_dim = layers[-1].out_dim
    hidden_dim = layers[0].out_dim if len(layers) > 1 else output_dim
    return MlpModel(layers, input_dim, hidden_dim, len(layers) - 1, output_dim)
