"""Deconvnet projection of a learnt feature back to the input spectrogram.

Starting from one channel of a layer's pooled activations, the path to the
input alternates unpooling through the recorded switches, ReLU, and the
transposed (adjoint) convolution of that layer.  Biases are not used.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernels import channels_last_weights, unpool_relu_tconv
from .nn import CnnModel, ForwardTrace, relu, transpose_conv, unpool


class InvalidRequest(ValueError):
    pass


class MapFileError(ValueError):
    pass


@dataclass(frozen=True)
class DeconvRequest:
    """Which feature to project: ``layer_index`` is 1-based, ``feature_index`` 0-based.

    ``keep`` is ``"all"`` or a positive int k (keep only the k strongest
    activations of the feature map).
    """

    layer_index: int
    feature_index: int
    keep: str | int = "all"

    def __post_init__(self):
        if self.layer_index < 1:
            raise InvalidRequest(f"layer_index must be >= 1, got {self.layer_index}")
        if self.feature_index < 0:
            raise InvalidRequest(f"feature_index must be >= 0, got {self.feature_index}")
        if self.keep != "all" and not (isinstance(self.keep, int) and self.keep >= 1):
            raise InvalidRequest(f"keep must be 'all' or a positive int, got {self.keep!r}")

    @property
    def label(self) -> str:
        return f"layer{self.layer_index}_feat{self.feature_index}"


@dataclass(frozen=True)
class DeconvolvedMap:
    values: np.ndarray  # (freq bins, frames), signed
    source: DeconvRequest | None = None

    @property
    def shape(self):
        return self.values.shape


def validate_request(model: CnnModel, req: DeconvRequest) -> None:
    n_layers = len(model.conv_layers)
    if not 1 <= req.layer_index <= n_layers:
        raise InvalidRequest(f"layer {req.layer_index} outside 1..{n_layers}")
    n_feat = model.conv_layers[req.layer_index - 1].out_ch
    if not 0 <= req.feature_index < n_feat:
        raise InvalidRequest(f"feature {req.feature_index} outside 0..{n_feat - 1} for layer {req.layer_index}")


def masked_start(trace: ForwardTrace, req: DeconvRequest, index: int = 0) -> np.ndarray:
    """Pooled activations of the requested layer with every other channel zeroed."""
    pooled = trace.pooled[req.layer_index - 1][index]
    start = np.zeros_like(pooled)
    fmap = pooled[req.feature_index]
    if req.keep == "all":
        start[req.feature_index] = fmap
    else:
        flat = fmap.ravel()
        top = np.argsort(-flat, kind="stable")[: req.keep]
        kept = np.zeros_like(flat)
        kept[top] = flat[top]
        start[req.feature_index] = kept.reshape(fmap.shape)
    return start


def project_down(
    model: CnnModel,
    trace: ForwardTrace,
    layer_index: int,
    start: np.ndarray,
    index: int = 0,
    use_relu: bool = True,
) -> np.ndarray:
    """Run the deconvnet path from pooled activations of ``layer_index`` to input space.

    ``start`` is (C, h, w) or a stack (B, C, h, w) sharing the switches of
    trace item ``index``.  Returns (in_ch, H, W) / (B, in_ch, H, W).
    """
    g = start
    for i in reversed(range(layer_index)):
        g = unpool(g, trace.switches[i][index])
        if use_relu:
            g = relu(g)
        g = transpose_conv(g, model.conv_layers[i])
    return g


def deconv_feature(
    model: CnnModel,
    trace: ForwardTrace,
    req: DeconvRequest,
    index: int = 0,
    use_relu: bool = True,
) -> DeconvolvedMap:
    """Project feature ``req`` of trace item ``index`` to the input spectrogram.

    The trace must come from an inference-mode forward pass of ``model``.
    ``use_relu=False`` bypasses the backward-path rectification (linearised check).
    """
    validate_request(model, req)
    start = masked_start(trace, req, index)
    out = project_down(model, trace, req.layer_index, start, index, use_relu)
    return DeconvolvedMap(out[0], req)


def deconv_layer(
    model: CnnModel,
    trace: ForwardTrace,
    layer_index: int,
    features=None,
    index: int = 0,
    chunk: int = 16,
) -> np.ndarray:
    """Whole-feature (keep=all) maps for many features of one layer at once.

    Returns (len(features), H, W) and agrees with :func:`deconv_feature` up
    to float32 summation order.  Runs channels-last through the compiled
    unpool/ReLU/transposed-conv kernel, skipping non-positive activations.
    """
    validate_request(model, DeconvRequest(layer_index, 0))
    if features is None:
        features = range(model.conv_layers[layer_index - 1].out_ch)
    features = list(features)
    for f in features:
        validate_request(model, DeconvRequest(layer_index, f))

    dtype = model.dtype
    offsets = [np.ascontiguousarray(s.offsets[index].transpose(1, 2, 0)) for s in trace.switches]
    hw = [s.input_hw for s in trace.switches]
    weights = [channels_last_weights(l.weights.astype(dtype)) for l in model.conv_layers]
    pooled = trace.pooled[layer_index - 1][index]  # (C, h, w)

    maps = np.empty((len(features),) + model.input_shape[1:], dtype=dtype)
    i = layer_index - 1
    for lo in range(0, len(features), chunk):
        sel = features[lo : lo + chunk]
        h, w = hw[i]
        # first step: only channel f is live, so scatter that channel alone
        out = np.zeros((len(sel), h + 2, w + 2, weights[i].shape[3]), dtype=dtype)
        for b, f in enumerate(sel):
            unpool_relu_tconv(
                np.ascontiguousarray(pooled[f])[None, :, :, None],
                np.ascontiguousarray(offsets[i][:, :, f : f + 1]),
                weights[i][f : f + 1],
                out[b : b + 1],
            )
        g = np.ascontiguousarray(out[:, 1 : h + 1, 1 : w + 1, :])
        for j in reversed(range(i)):
            h, w = hw[j]
            out = np.zeros((len(sel), h + 2, w + 2, weights[j].shape[3]), dtype=dtype)
            unpool_relu_tconv(g, offsets[j], weights[j], out)
            g = np.ascontiguousarray(out[:, 1 : h + 1, 1 : w + 1, :])
        maps[lo : lo + len(sel)] = g[..., 0]
    return maps


# ---------------------------------------------------------------------------
# Export formats
# ---------------------------------------------------------------------------

_MAGIC = b"DMAP"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_map_binary(path, values: np.ndarray) -> None:
    """``DMAP`` magic, u32 version, u32 rows, u32 cols, then row-major LE float32."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"map must be 2-D, got shape {values.shape}")
    rows, cols = values.shape
    Path(path).write_bytes(_HEADER.pack(_MAGIC, _VERSION, rows, cols) + values.astype("<f4").tobytes())


def read_map_binary(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise MapFileError(f"{path}: file too short for a map header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise MapFileError(f"{path}: not a version-{_VERSION} map file")
    body = raw[_HEADER.size :]
    if len(body) != 4 * rows * cols:
        raise MapFileError(f"{path}: expected {4 * rows * cols} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


def write_map_csv(path, values: np.ndarray) -> None:
    """One line per frequency bin, comma-separated values per frame."""
    np.savetxt(path, np.asarray(values, dtype=np.float64), delimiter=",", fmt="%.9g")


def read_map_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
