"""A small numpy CNN: same-padded 3x3 convolutions, ReLU, 2x2 max-pooling with
recorded switches, inverted dropout, two dense layers and softmax, trained by
mini-batch SGD with momentum.

Activations are laid out as (batch, channel, row, col).  Public entry points
also accept a single (channel, row, col) tensor.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
GENRES = ("percussive", "harmonic", "mixed")


class ShapeError(ValueError):
    pass


class SwitchError(ValueError):
    """A switch record does not fit the tensor it is applied to."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class ModelFileError(ValueError):
    """Manifest and blob of a saved model disagree or are unreadable."""


# ---------------------------------------------------------------------------
# Model containers
# ---------------------------------------------------------------------------


@dataclass
class ConvLayer:
    weights: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2:] != (3, 3):
            raise ShapeError(f"conv kernel must be (out, in, 3, 3), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"conv bias {self.bias.shape} does not match {self.weights.shape[0]} outputs")

    @property
    def in_ch(self) -> int:
        return self.weights.shape[1]

    @property
    def out_ch(self) -> int:
        return self.weights.shape[0]


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"dense weights {self.weights.shape} / bias {self.bias.shape} mismatch")


@dataclass
class CnnModel:
    conv_layers: list[ConvLayer]
    dense_layers: list[DenseLayer]
    input_shape: tuple[int, int, int] = (1, 257, 171)
    dropout_rate: float = 0.5
    class_names: tuple[str, ...] = GENRES

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.class_names = tuple(self.class_names)
        shapes = self.pooled_shapes()
        c, h, w = shapes[-1]
        if len(self.dense_layers) != 2:
            raise ShapeError("model needs exactly two dense layers")
        if self.dense_layers[0].weights.shape[1] != c * h * w:
            raise ShapeError(
                f"first dense layer expects {self.dense_layers[0].weights.shape[1]} inputs, "
                f"conv stack produces {c}x{h}x{w}={c * h * w}"
            )
        if self.dense_layers[1].weights.shape[1] != self.dense_layers[0].weights.shape[0]:
            raise ShapeError("dense layers do not chain")
        if self.dense_layers[1].weights.shape[0] != len(self.class_names):
            raise ShapeError("output width must equal number of class names")

    def pooled_shapes(self) -> list[tuple[int, int, int]]:
        """Post-pool shape after each conv block, validating channel chaining."""
        c, h, w = self.input_shape
        out = []
        for i, layer in enumerate(self.conv_layers):
            if layer.in_ch != c:
                raise ShapeError(f"conv layer {i + 1} expects {layer.in_ch} channels, gets {c}")
            c, h, w = layer.out_ch, h // 2, w // 2
            if h < 1 or w < 1:
                raise ShapeError(f"input {self.input_shape} too small for {len(self.conv_layers)} pools")
            out.append((c, h, w))
        return out

    @property
    def dtype(self):
        return self.conv_layers[0].weights.dtype

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.conv_layers + self.dense_layers:
            params += [layer.weights, layer.bias]
        return params

    def copy(self) -> "CnnModel":
        return copy.deepcopy(self)


def build_model(
    input_shape=(1, 257, 171),
    n_conv: int = 5,
    channels: int = 64,
    hidden: int = 256,
    class_names=GENRES,
    dropout_rate: float = 0.5,
    seed: int = 0,
    dtype=np.float32,
) -> CnnModel:
    """He-uniform initialised weights, zero biases."""
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    convs = []
    c = input_shape[0]
    for _ in range(n_conv):
        convs.append(ConvLayer(he((channels, c, 3, 3), c * 9), np.zeros(channels, dtype)))
        c = channels
    h, w = input_shape[1], input_shape[2]
    for _ in range(n_conv):
        h, w = h // 2, w // 2
    flat = channels * h * w
    dense = [
        DenseLayer(he((hidden, flat), flat), np.zeros(hidden, dtype)),
        DenseLayer(he((len(class_names), hidden), hidden), np.zeros(len(class_names), dtype)),
    ]
    return CnnModel(convs, dense, tuple(input_shape), dropout_rate, tuple(class_names))


def prepare_input(magnitude: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Scale a magnitude spectrogram by its own maximum (all-zero stays zero)."""
    magnitude = np.asarray(magnitude, dtype=np.float64)
    peak = magnitude.max(initial=0.0)
    if peak > 0:
        magnitude = magnitude / peak
    return magnitude.astype(dtype)


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C, H, W) or (N, C, H, W) tensor, got shape {x.shape}")


def _padded_flat(x: np.ndarray) -> np.ndarray:
    """Zero-pad by one pixel (plus one spare row) and flatten the spatial axes."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 3, w + 2), dtype=x.dtype)
    xp[:, :, 1 : h + 1, 1 : w + 1] = x
    return xp.reshape(n, c, -1)


def _correlate3x3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 cross-correlation of a batch, no bias.

    Works on the padded image flattened row-major: output pixel p on the
    (h, w + 2) grid reads input p + dy * (w + 2) + dx, so every kernel tap is
    one GEMM over a contiguous slice.  The two wrap-around columns are dropped.
    """
    n, c, h, w = x.shape
    wp = w + 2
    length = h * wp
    flat = _padded_flat(x)
    offsets = [dy * wp + dx for dy in range(3) for dx in range(3)]
    if c < 8:
        # few input channels: one GEMM over stacked taps beats nine skinny ones
        cols = np.concatenate([flat[:, None, :, o : o + length] for o in offsets], axis=1)
        cols = cols.reshape(n, 9 * c, length)
        k2 = np.ascontiguousarray(kernel.transpose(0, 2, 3, 1).reshape(kernel.shape[0], 9 * c))
        return np.matmul(k2, cols).reshape(n, -1, h, wp)[:, :, :, :w]
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 0, 1))
    out = np.zeros((n, kernel.shape[0], length), dtype=np.result_type(x, kernel))
    tmp = np.empty_like(out)
    for dy in range(3):
        for dx in range(3):
            off = dy * wp + dx
            np.matmul(taps[dy, dx], flat[:, :, off : off + length], out=tmp)
            out += tmp
    return out.reshape(n, -1, h, wp)[:, :, :, :w]


def _kernel_grad(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """d(loss)/d(kernel) for :func:`_correlate3x3` given input and output gradient."""
    n, c, h, w = x.shape
    wp = w + 2
    length = h * wp
    flat = _padded_flat(x)
    g = np.zeros((n, grad_out.shape[1], h, wp), dtype=grad_out.dtype)
    g[:, :, :, :w] = grad_out
    g = g.reshape(n, -1, length)
    kgrad = np.empty((grad_out.shape[1], c, 3, 3), dtype=np.result_type(x, grad_out))
    for dy in range(3):
        for dx in range(3):
            off = dy * wp + dx
            win = flat[:, :, off : off + length]
            kgrad[:, :, dy, dx] = np.matmul(g, win.transpose(0, 2, 1)).sum(axis=0)
    return kgrad


def flipped_transposed(kernel: np.ndarray) -> np.ndarray:
    """Swap in/out channels and rotate each 3x3 tap grid by 180 degrees."""
    return np.ascontiguousarray(kernel.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def conv2d_same(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    xb, single = _as_batch(np.asarray(x))
    if xb.shape[1] != layer.in_ch:
        raise ShapeError(f"input has {xb.shape[1]} channels, layer expects {layer.in_ch}")
    out = _correlate3x3(xb, layer.weights) + layer.bias[None, :, None, None]
    return out[0] if single else out


def transpose_conv(y: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Adjoint of :func:`conv2d_same` without its bias."""
    yb, single = _as_batch(np.asarray(y))
    if yb.shape[1] != layer.out_ch:
        raise ShapeError(f"input has {yb.shape[1]} channels, layer produces {layer.out_ch}")
    out = _correlate3x3(yb, flipped_transposed(layer.weights))
    return out[0] if single else out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


@dataclass(frozen=True)
class SwitchRecord:
    """Argmax position of every 2x2 pooling window.

    ``offsets`` holds 0..3 (row-major position inside the window) with the
    pooled tensor's shape; ``input_hw`` is the pre-pool spatial size.
    """

    offsets: np.ndarray
    input_hw: tuple[int, int]

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Absolute (row, col) source coordinates in the pre-pool grid."""
        h, w = self.offsets.shape[-2:]
        rows = 2 * np.arange(h)[:, None] + self.offsets // 2
        cols = 2 * np.arange(w)[None, :] + self.offsets % 2
        return rows, cols

    def __getitem__(self, index) -> "SwitchRecord":
        return SwitchRecord(self.offsets[index], self.input_hw)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, SwitchRecord]:
    """2x2/stride-2 max-pool; odd trailing rows/cols are dropped.

    Ties go to the first position in row-major order.
    """
    xb, single = _as_batch(np.asarray(x))
    h, w = xb.shape[-2:]
    ph, pw = h // 2, w // 2
    quads = [xb[..., i : 2 * ph : 2, j : 2 * pw : 2] for i in (0, 1) for j in (0, 1)]
    pooled = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    idx = np.full(pooled.shape, 3, dtype=np.int8)
    for k in (2, 1, 0):
        idx[quads[k] == pooled] = k
    switches = SwitchRecord(idx, (h, w))
    if single:
        return pooled[0], switches[0]
    return pooled, switches


def unpool(pooled: np.ndarray, switches: SwitchRecord, target_shape=None) -> np.ndarray:
    """Place each pooled value at its recorded argmax position; zeros elsewhere."""
    pooled = np.asarray(pooled)
    offsets = switches.offsets
    if pooled.shape[pooled.ndim - offsets.ndim :] != offsets.shape:
        raise SwitchError(f"pooled tensor {pooled.shape} does not match switches {offsets.shape}")
    h, w = switches.input_hw if target_shape is None else tuple(target_shape)[-2:]
    ph, pw = pooled.shape[-2:]
    if h // 2 != ph or w // 2 != pw:
        raise SwitchError(f"target {h}x{w} cannot have been pooled to {ph}x{pw}")
    if offsets.size and (offsets.min() < 0 or offsets.max() > 3):
        raise SwitchError("switch offset outside its 2x2 window")
    out = np.zeros(pooled.shape[:-2] + (h, w), dtype=pooled.dtype)
    zero = pooled.dtype.type(0)
    for k in range(4):
        i, j = divmod(k, 2)
        out[..., i : 2 * ph : 2, j : 2 * pw : 2] = np.where(offsets == k, pooled, zero)
    return out


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Everything a forward pass leaves behind for backprop and deconvolution.

    All arrays carry a leading batch axis.
    """

    conv_inputs: list = field(default_factory=list)
    pre_pool: list = field(default_factory=list)  # post-activation, pre-pool
    switches: list = field(default_factory=list)
    pooled: list = field(default_factory=list)
    dropout_masks: list = field(default_factory=list)
    flat: np.ndarray | None = None
    hidden_pre: np.ndarray | None = None
    hidden: np.ndarray | None = None
    hidden_mask: np.ndarray | None = None
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    use_relu: bool = True


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout_mask(rng, shape, rate, dtype):
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / dtype.type(1.0 - rate)


def forward(
    model: CnnModel,
    x: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    use_relu: bool = True,
) -> ForwardTrace:
    """Run the network on one input (H, W) / (C, H, W) or a batch (N, C, H, W).

    ``mode="train"`` applies inverted dropout after every pool and after the
    hidden dense layer, drawing masks from ``rng``.  ``use_relu=False`` turns
    every ReLU into the identity (used for linearised checks).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    xb, _ = _as_batch(x)
    if xb.shape[1:] != model.input_shape:
        raise ShapeError(f"input shape {xb.shape[1:]} does not match model input {model.input_shape}")
    dropout = mode == "train" and model.dropout_rate > 0
    if dropout and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    act = relu if use_relu else (lambda v: v)
    dtype = model.dtype
    h = xb.astype(dtype, copy=False)

    trace = ForwardTrace(use_relu=use_relu)
    for layer in model.conv_layers:
        trace.conv_inputs.append(h)
        a = act(conv2d_same(h, layer))
        p, s = maxpool2x2(a)
        trace.pre_pool.append(a)
        trace.switches.append(s)
        trace.pooled.append(p)
        if dropout:
            m = _dropout_mask(rng, p.shape, model.dropout_rate, dtype)
            trace.dropout_masks.append(m)
            h = p * m
        else:
            trace.dropout_masks.append(None)
            h = p

    flat = h.reshape(h.shape[0], -1)
    d1, d2 = model.dense_layers
    hidden_pre = flat @ d1.weights.T + d1.bias
    hidden = act(hidden_pre)
    trace.flat, trace.hidden_pre, trace.hidden = flat, hidden_pre, hidden
    if dropout:
        trace.hidden_mask = _dropout_mask(rng, hidden.shape, model.dropout_rate, dtype)
        hidden = hidden * trace.hidden_mask
    trace.logits = hidden @ d2.weights.T + d2.bias
    trace.probs = softmax(trace.logits.astype(np.float64))
    return trace


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def backward(model: CnnModel, trace: ForwardTrace, grad_logits: np.ndarray) -> list[np.ndarray]:
    """Gradients for ``model.parameters()`` given d(loss)/d(logits)."""
    dtype = model.dtype
    d1, d2 = model.dense_layers
    g = grad_logits.astype(dtype)

    hidden = trace.hidden if trace.hidden_mask is None else trace.hidden * trace.hidden_mask
    gw2 = g.T @ hidden
    gb2 = g.sum(axis=0)
    g = g @ d2.weights
    if trace.hidden_mask is not None:
        g = g * trace.hidden_mask
    if trace.use_relu:
        g = g * (trace.hidden_pre > 0)
    gw1 = g.T @ trace.flat
    gb1 = g.sum(axis=0)
    g = (g @ d1.weights).reshape(trace.pooled[-1].shape)

    conv_grads = []
    for i in reversed(range(len(model.conv_layers))):
        layer = model.conv_layers[i]
        if trace.dropout_masks[i] is not None:
            g = g * trace.dropout_masks[i]
        g = unpool(g, trace.switches[i])
        if trace.use_relu:
            g = g * (trace.pre_pool[i] > 0)
        gw = _kernel_grad(trace.conv_inputs[i], g)
        gb = g.sum(axis=(0, 2, 3))
        conv_grads.append((gw, gb))
        if i > 0:
            g = transpose_conv(g, layer)

    grads = []
    for gw, gb in reversed(conv_grads):
        grads += [gw, gb]
    return grads + [gw1, gb1, gw2, gb2]


def loss_and_grads(model, x, labels, mode="infer", rng=None, use_relu=True):
    trace = forward(model, x, mode=mode, rng=rng, use_relu=use_relu)
    labels = np.asarray(labels)
    loss = cross_entropy(trace.probs, labels)
    grad = trace.probs.copy()
    grad[np.arange(len(labels)), labels] -= 1.0
    grad /= len(labels)
    return loss, backward(model, trace, grad), trace


def predict(model: CnnModel, x: np.ndarray, batch: int = 16) -> np.ndarray:
    """Class probabilities for a stack of prepared inputs (N, H, W) or (N, C, H, W)."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, None]
    out = [forward(model, x[i : i + batch]).probs for i in range(0, len(x), batch)]
    return np.concatenate(out) if out else np.zeros((0, len(model.class_names)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 16
    epochs: int = 30
    seed: int = 0
    # stop as soon as validation accuracy reaches this value (None: run all epochs)
    target_val_acc: float | None = None
    # return the parameters of the epoch with the best validation accuracy
    keep_best: bool = False


def _as_xy(dataset):
    if hasattr(dataset, "spectrograms"):
        x, y = dataset.spectrograms, dataset.labels
    else:
        x, y = dataset
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, None]
    return x, np.asarray(y, dtype=np.intp)


def evaluate(model: CnnModel, dataset, batch: int = 16) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in inference mode."""
    x, y = _as_xy(dataset)
    probs = predict(model, x, batch)
    return cross_entropy(probs, y), float(np.mean(probs.argmax(axis=1) == y))


def train(model: CnnModel, dataset, hyper: TrainConfig | None = None, validation=None):
    """Mini-batch SGD with momentum on softmax cross-entropy.

    Returns a trained copy of ``model`` and a list of per-epoch metric dicts.
    ``dataset`` / ``validation`` are (inputs, labels) pairs or objects with
    ``spectrograms`` and ``labels``; inputs must already be prepared.
    ``target_val_acc`` and ``keep_best`` only take effect with a validation set.
    """
    hyper = hyper or TrainConfig()
    x, y = _as_xy(dataset)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if y.min() < 0 or y.max() >= len(model.class_names):
        raise ValueError(f"labels must lie in 0..{len(model.class_names) - 1}")
    model = model.copy()
    rng = np.random.default_rng(hyper.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p) for p in params]
    lr = model.dtype.type(hyper.lr)
    mu = model.dtype.type(hyper.momentum)
    history = []
    best, best_acc = None, -1.0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(x))
        total_loss, correct = 0.0, 0
        for start in range(0, len(x), hyper.batch):
            idx = order[start : start + hyper.batch]
            loss, grads, trace = loss_and_grads(model, x[idx], y[idx], mode="train", rng=rng)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            total_loss += loss * len(idx)
            correct += int(np.sum(trace.probs.argmax(axis=1) == y[idx]))
            # overflow here surfaces as a non-finite loss and TrainingDivergedError
            with np.errstate(over="ignore", invalid="ignore"):
                for p, v, g in zip(params, velocity, grads):
                    v *= mu
                    v -= lr * g
                    p += v
        record = {
            "epoch": epoch,
            "train_loss": total_loss / len(x),
            "train_acc": correct / len(x),
        }
        if validation is not None:
            record["val_loss"], record["val_acc"] = evaluate(model, validation, hyper.batch)
        if not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDivergedError(epoch, float("nan"))
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in record.items() if k != "epoch"})
        history.append(record)
        if validation is None:
            continue
        if hyper.keep_best and record["val_acc"] > best_acc:
            best, best_acc = model.copy(), record["val_acc"]
        if hyper.target_val_acc is not None and record["val_acc"] >= hyper.target_val_acc:
            log.info("validation accuracy target %.3f reached at epoch %d", hyper.target_val_acc, epoch)
            return model, history
    if best is not None:
        return best, history
    return model, history


# ---------------------------------------------------------------------------
# Persistence: JSON manifest + little-endian float32 blob
# ---------------------------------------------------------------------------


def _blob_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def save_model(model: CnnModel, path) -> None:
    """Write ``path`` (JSON manifest) and the sibling ``.bin`` weight blob."""
    path = Path(path)
    if not all(np.all(np.isfinite(p)) for p in model.parameters()):
        raise ValueError("refusing to save non-finite parameters")
    layers = [
        {"kind": "conv", "weights": list(l.weights.shape), "bias": list(l.bias.shape)}
        for l in model.conv_layers
    ] + [
        {"kind": "dense", "weights": list(l.weights.shape), "bias": list(l.bias.shape)}
        for l in model.dense_layers
    ]
    blob = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in model.parameters())
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "dropout_rate": model.dropout_rate,
        "class_names": list(model.class_names),
        "layers": layers,
        "blob": _blob_path(path).name,
        "blob_bytes": len(blob),
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    _blob_path(path).write_bytes(blob)


def load_model(path) -> CnnModel:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        blob = (path.parent / manifest["blob"]).read_bytes()
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ModelFileError(f"{path}: cannot read model ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported format version {manifest.get('format_version')}")
    try:
        shapes = [(l["kind"], tuple(l["weights"]), tuple(l["bias"])) for l in manifest["layers"]]
        expected = sum(4 * (int(np.prod(w)) + int(np.prod(b))) for _, w, b in shapes)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"{path}: malformed layer list ({exc})") from exc
    if expected != len(blob) or manifest.get("blob_bytes") != len(blob):
        raise ModelFileError(
            f"{path}: blob holds {len(blob)} bytes, manifest describes {expected} "
            f"(declared {manifest.get('blob_bytes')})"
        )
    values = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    pos = 0

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape))
        arr = values[pos : pos + n].reshape(shape).copy()
        pos += n
        return arr

    convs, dense = [], []
    try:
        for kind, wshape, bshape in shapes:
            w, b = take(wshape), take(bshape)
            if kind == "conv":
                convs.append(ConvLayer(w, b))
            elif kind == "dense":
                dense.append(DenseLayer(w, b))
            else:
                raise ModelFileError(f"{path}: unknown layer kind {kind!r}")
        return CnnModel(
            convs,
            dense,
            tuple(manifest["input_shape"]),
            float(manifest["dropout_rate"]),
            tuple(manifest["class_names"]),
        )
    except (ShapeError, KeyError, ValueError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"{path}: inconsistent model description ({exc})") from exc
