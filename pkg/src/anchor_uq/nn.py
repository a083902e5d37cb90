"""Minimal dense ReLU network: forward, backprop, Adam, dropout, positional embedding.

Parameters live in one flat float64 buffer; per-layer weight matrices and
bias vectors are views into it.  This keeps the optimizer update a single
pass over contiguous memory (see ``_accel.adam_update``) and makes
checkpoints trivial to serialize.

Weight matrices are stored ``(fan_in, fan_out)`` so a layer computes
``h @ W + b``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _accel
from .errors import ConfigurationError, NumericError, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# rows per chunk in eval-mode forward passes over large query sets
_EVAL_CHUNK = 8192


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_layers: tuple = (128, 128, 128, 128)
    output_dim: int = 1
    activation: str = "relu"
    dropout_rate: float = 0.0
    pe_frequencies: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError("input_dim and output_dim must be >= 1")
        if any(w < 1 for w in self.hidden_layers):
            raise ConfigurationError(f"zero-width hidden layer in {self.hidden_layers}")
        if self.activation != "relu":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        if self.pe_frequencies < 0:
            raise ConfigurationError("pe_frequencies must be >= 0")

    @property
    def effective_input_dim(self) -> int:
        if self.pe_frequencies > 0:
            return self.input_dim * 2 * self.pe_frequencies
        return self.input_dim

    @property
    def layer_sizes(self) -> list[int]:
        return [self.effective_input_dim, *self.hidden_layers, self.output_dim]

    def replace(self, **changes) -> "MlpConfig":
        data = asdict(self)
        data.update(changes)
        return MlpConfig(**data)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 500
    batch_size: int = 64
    loss: str = "mse"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.loss not in ("mse", "softmax_cross_entropy"):
            raise ConfigurationError(f"unknown loss {self.loss!r}")


def _layout(sizes):
    """Offsets of (W, b) for each layer inside the flat parameter buffer."""
    spans = []
    offset = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w_span = (offset, offset + fan_in * fan_out, (fan_in, fan_out))
        offset += fan_in * fan_out
        b_span = (offset, offset + fan_out, (fan_out,))
        offset += fan_out
        spans.append((w_span, b_span))
    return spans, offset


def _views(buffer, spans):
    ws, bs = [], []
    for (w0, w1, wshape), (b0, b1, bshape) in spans:
        ws.append(buffer[w0:w1].reshape(wshape))
        bs.append(buffer[b0:b1].reshape(bshape))
    return ws, bs


class MlpSurrogate:
    """Dense ReLU network with Adam state.

    Attributes
    ----------
    config : MlpConfig
    params : ndarray
        Flat parameter buffer; ``weights[i]`` and ``biases[i]`` are views.
    adam_m, adam_v : ndarray
        Adam first/second moment buffers, same layout as ``params``.
    step : int
        Number of Adam updates applied so far.
    """

    def __init__(self, config: MlpConfig, params=None):
        self.config = config
        self._spans, size = _layout(config.layer_sizes)
        if params is None:
            params = np.zeros(size)
        params = np.ascontiguousarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise ShapeError(f"expected {size} parameters, got {params.shape}")
        self.params = params
        self.weights, self.biases = _views(self.params, self._spans)
        self.adam_m = np.zeros(size)
        self.adam_v = np.zeros(size)
        self.step = 0

    @property
    def n_params(self) -> int:
        return self.params.size

    def unflatten(self, flat):
        """Split a flat buffer with this model's layout into (weights, biases) views."""
        flat = np.asarray(flat)
        if flat.shape != self.params.shape:
            raise ShapeError(f"flat buffer has shape {flat.shape}, expected {self.params.shape}")
        return _views(flat, self._spans)

    def clone(self) -> "MlpSurrogate":
        out = MlpSurrogate(self.config, self.params.copy())
        out.adam_m[:] = self.adam_m
        out.adam_v[:] = self.adam_v
        out.step = self.step
        return out

    def __deepcopy__(self, memo):
        return self.clone()


def init_mlp(config: MlpConfig) -> MlpSurrogate:
    """Initialize weights with He fan-in scaling; the output layer uses 1/fan_in.

    Biases start at zero.  The weights depend only on ``config`` (seed
    included), so the same config always gives bitwise-identical weights.
    """
    model = MlpSurrogate(config)
    rng = np.random.default_rng(config.seed)
    n_layers = len(model.weights)
    for i, w in enumerate(model.weights):
        fan_in = w.shape[0]
        gain = 1.0 if i == n_layers - 1 else 2.0
        w[...] = rng.standard_normal(w.shape) * np.sqrt(gain / fan_in)
    return model


def positional_embed(x, frequencies: int):
    """Sinusoidal embedding of each input coordinate.

    For coordinate ``u`` and frequency index ``k`` in ``0..F-1`` the output
    holds ``sin(2**k * pi * u)`` followed by ``cos(2**k * pi * u)``.  The
    layout is coordinate-major: all ``2F`` features of column 0, then
    column 1, and so on, giving ``d * 2 * F`` columns.
    """
    if frequencies < 1:
        raise ConfigurationError("positional_embed needs frequencies >= 1")
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    scales = np.pi * (2.0 ** np.arange(frequencies))
    arg = x2[:, :, None] * scales[None, None, :]
    out = np.empty(x2.shape + (frequencies, 2))
    out[..., 0] = np.sin(arg)
    out[..., 1] = np.cos(arg)
    out = out.reshape(x2.shape[0], -1)
    return out[0] if squeeze else out


def _check_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise ShapeError(
            f"input width {x.shape[-1] if x.ndim else 0} does not match input_dim {model.config.input_dim}"
        )
    return x


def draw_dropout_masks(config: MlpConfig, n_rows: int, rng):
    """Inverted-dropout masks, one ``(n_rows, width)`` array per hidden layer, drawn in layer order.

    Each entry is ``0`` (dropped) or ``1/(1-rate)`` (kept); a unit is kept
    when its uniform draw is ``>= rate``.
    """
    rate = config.dropout_rate
    keep_scale = 1.0 / (1.0 - rate)
    masks = []
    for width in config.hidden_layers:
        u = rng.random((n_rows, width))
        masks.append(np.where(u >= rate, keep_scale, 0.0))
    return masks


def _forward_cache(model, x, masks, dtype=np.float64):
    cfg = model.config
    h = positional_embed(x, cfg.pe_frequencies) if cfg.pe_frequencies > 0 else x
    if h.dtype != dtype:
        h = h.astype(dtype)
    acts = [h]
    n_layers = len(model.weights)
    for i in range(n_layers):
        z = h @ model.weights[i].astype(dtype, copy=False)
        z += model.biases[i].astype(dtype, copy=False)
        if i < n_layers - 1:
            np.maximum(z, 0.0, out=z)
            if masks is not None:
                z *= masks[i]
        acts.append(z)
        h = z
    return acts


def forward(model: MlpSurrogate, x, mode: str = "eval", rng=None, masks=None, dtype=np.float64):
    """Evaluate the network on a batch.

    In ``"train"`` mode dropout masks are drawn from ``rng`` (or taken from
    ``masks``) when the model's dropout rate is positive.  ``"eval"`` mode
    is deterministic.  ``dtype=np.float32`` runs the eval-mode matmuls in
    single precision (outputs are returned as float64).
    """
    x = _check_input(model, x)
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    use_dropout = mode == "train" and model.config.dropout_rate > 0
    if use_dropout:
        if masks is None:
            if rng is None:
                raise ValueError("train-mode forward with dropout needs an rng")
            masks = draw_dropout_masks(model.config, x.shape[0], rng)
        return _forward_cache(model, x, masks)[-1]
    if x.shape[0] <= _EVAL_CHUNK:
        return _forward_cache(model, x, None, dtype)[-1].astype(np.float64, copy=False)
    out = np.empty((x.shape[0], model.config.output_dim))
    for start in range(0, x.shape[0], _EVAL_CHUNK):
        stop = start + _EVAL_CHUNK
        out[start:stop] = _forward_cache(model, x[start:stop], None, dtype)[-1]
    return out


def forward_thinned(model: MlpSurrogate, x, masks, dtype=np.float64):
    """Outputs of ``P`` thinned networks on the same batch, shape ``(P, n, output_dim)``.

    ``masks`` holds one ``(P, width)`` array per hidden layer: row ``p`` is
    the mask of network ``p``, shared by every input row.  Equivalent to
    ``P`` train-mode forwards with ``(1, width)`` masks, but the unmasked
    first layer is computed once and the passes are stacked.  ``dtype``
    as in ``forward``.
    """
    x = _check_input(model, x)
    n_hidden = len(model.weights) - 1
    if len(masks) != n_hidden:
        raise ShapeError(f"need {n_hidden} mask arrays, got {len(masks)}")
    passes = masks[0].shape[0]
    out = np.empty((passes, x.shape[0], model.config.output_dim))
    chunk = max(1, _EVAL_CHUNK // passes)
    cfg = model.config
    weights = [w.astype(dtype, copy=False) for w in model.weights]
    biases = [b.astype(dtype, copy=False) for b in model.biases]
    masks = [m.astype(dtype, copy=False) for m in masks]
    for start in range(0, x.shape[0], chunk):
        xb = x[start:start + chunk]
        h = positional_embed(xb, cfg.pe_frequencies) if cfg.pe_frequencies > 0 else xb
        z = h.astype(dtype, copy=False) @ weights[0]
        z += biases[0]
        np.maximum(z, 0.0, out=z)
        rows = xb.shape[0]
        h = (z[None, :, :] * masks[0][:, None, :]).reshape(passes * rows, -1)
        for i in range(1, n_hidden + 1):
            z = h @ weights[i]
            z += biases[i]
            if i < n_hidden:
                np.maximum(z, 0.0, out=z)
                z = (z.reshape(passes, rows, -1) * masks[i][:, None, :]).reshape(passes * rows, -1)
            h = z
        out[:, start:start + rows] = h.reshape(passes, rows, -1)
    return out


def _loss_and_delta(out, targets, loss):
    n = out.shape[0]
    if loss == "mse":
        targets = np.asarray(targets, dtype=np.float64).reshape(out.shape)
        resid = out - targets
        value = float(np.mean(resid * resid))
        delta = resid * (2.0 / resid.size)
    elif loss == "softmax_cross_entropy":
        targets = np.asarray(targets)
        if targets.ndim == 2 and targets.shape == out.shape:
            labels = np.argmax(targets, axis=1)
        else:
            labels = targets.reshape(-1).astype(np.int64)
        shifted = out - out.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        logp = shifted - logsum[:, None]
        value = float(-np.mean(logp[np.arange(n), labels]))
        delta = np.exp(logp)
        delta[np.arange(n), labels] -= 1.0
        delta /= n
    else:
        raise ConfigurationError(f"unknown loss {loss!r}")
    return value, delta


def backward(model: MlpSurrogate, x, targets, loss: str = "mse", mode: str = "eval", rng=None, masks=None):
    """Loss and its gradient with respect to every parameter.

    Returns ``(loss_value, grad)`` where ``grad`` is a flat array with the
    same layout as ``model.params`` (``model.unflatten(grad)`` gives the
    per-layer views).  MSE is averaged over all output entries; softmax
    cross-entropy over samples, with targets given as class indices or
    one-hot rows.
    """
    x = _check_input(model, x)
    use_dropout = mode == "train" and model.config.dropout_rate > 0
    if use_dropout and masks is None:
        if rng is None:
            raise ValueError("train-mode backward with dropout needs an rng")
        masks = draw_dropout_masks(model.config, x.shape[0], rng)
    if not use_dropout:
        masks = None
    acts = _forward_cache(model, x, masks)
    value, delta = _loss_and_delta(acts[-1], targets, loss)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value!r}", value=value)

    grad = np.empty_like(model.params)
    gws, gbs = _views(grad, model._spans)
    for i in range(len(model.weights) - 1, -1, -1):
        np.matmul(acts[i].T, delta, out=gws[i])
        np.sum(delta, axis=0, out=gbs[i])
        if i > 0:
            delta = delta @ model.weights[i].T
            # acts[i] is post-ReLU (and post-mask); zero entries carry no gradient
            if masks is not None:
                delta *= masks[i - 1]
            delta *= acts[i] > 0
    return value, grad


def adam_step(model: MlpSurrogate, grads, learning_rate: float) -> MlpSurrogate:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8), in place; returns ``model``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != model.params.shape:
        raise ShapeError(f"gradient shape {grads.shape} does not match parameters {model.params.shape}")
    model.step += 1
    _accel.adam_update(
        model.params, grads, model.adam_m, model.adam_v,
        learning_rate, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, model.step,
    )
    return model


def train(model, x, y, train_config: TrainConfig, rng, batch_transform=None):
    """Mini-batch Adam training; returns the per-epoch mean training loss.

    ``batch_transform(xb, rng)`` is applied to every mini-batch of inputs
    before the forward pass (anchoring hooks in here).  Batches are drawn
    from a fresh permutation each epoch; the batch size is clamped to the
    dataset size.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64) if train_config.loss == "mse" else np.asarray(y)
    n = x.shape[0]
    bs = min(train_config.batch_size, n)
    history = []
    for _ in range(train_config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb = x[idx]
            if batch_transform is not None:
                xb = batch_transform(xb, rng)
            value, grad = backward(model, xb, y[idx], train_config.loss, mode="train", rng=rng)
            adam_step(model, grad, train_config.learning_rate)
            total += value * len(idx)
        history.append(total / n)
    return history


def fit_mlp(x, y, mlp_config: MlpConfig, train_config: TrainConfig, rng=None):
    """Initialize from ``mlp_config`` and train on ``(x, y)``; returns ``(model, loss_history)``."""
    model = init_mlp(mlp_config)
    if rng is None:
        rng = np.random.default_rng(mlp_config.seed)
    history = train(model, x, y, train_config, rng)
    return model, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AUQW"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: MlpSurrogate, path, extra=None):
    """Write a versioned binary checkpoint.

    Layout: 4-byte magic, little-endian uint32 version, uint32 header
    length, UTF-8 JSON header (config, per-layer shapes, Adam step, extra
    metadata), then params, adam_m and adam_v as little-endian float64.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "layers": [
            {"weight_shape": list(w.shape), "bias_shape": list(b.shape)}
            for w, b in zip(model.weights, model.biases)
        ],
        "n_params": int(model.n_params),
        "adam_step": int(model.step),
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for buf in (model.params, model.adam_m, model.adam_v):
            fh.write(buf.astype("<f8").tobytes())


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; returns ``(model, extra)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    cfg = dict(header["config"])
    cfg["hidden_layers"] = tuple(cfg["hidden_layers"])
    model = MlpSurrogate(MlpConfig(**cfg))
    n = header["n_params"]
    if n != model.n_params:
        raise ShapeError(f"{path}: header declares {n} params, config implies {model.n_params}")
    body = np.frombuffer(raw[12 + hlen:], dtype="<f8")
    if body.size != 3 * n:
        raise ShapeError(f"{path}: truncated parameter payload")
    model.params[:] = body[:n]
    model.adam_m[:] = body[n:2 * n]
    model.adam_v[:] = body[2 * n:]
    model.step = header["adam_step"]
    return model, header.get("extra", {})
