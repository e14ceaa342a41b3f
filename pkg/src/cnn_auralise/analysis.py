"""Effective receptive-field table and the per-layer feature correlation study."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .deconv import deconv_layer
from .dsp import HOP, N_FFT, SAMPLE_RATE, AudioBuffer, stft
from .nn import CnnModel, ForwardTrace, forward, prepare_input
from .synth import CHORDS, INSTRUMENTS, KEYS, ModelSignalSpec, all_specs

log = logging.getLogger(__name__)

REFERENCE_WIDTH_MS = (93, 162, 302, 580, 1137)
REFERENCE_HEIGHT_HZ = (86, 151, 280, 538, 1270)
ATTRIBUTES = ("key", "chord", "instrument")


# ---------------------------------------------------------------------------
# Receptive fields
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RfEntry:
    layer: int
    pixels_per_axis: int
    width_ms: float
    height_hz: float
    width_ms_exact: float


def effective_rf(
    layer: int,
    n_fft: int = N_FFT,
    hop: int = HOP,
    sr: int = SAMPLE_RATE,
    ms_precision: float | None = 0.1,
) -> RfEntry:
    """Effective kernel size of a conv layer in milliseconds and hertz.

    A layer-l unit spans n = 3 * 2**(l - 1) frames and bins.  Width is the
    span of n overlapping frames, (n - 1) hops plus one window.  With
    ``ms_precision`` set, hop and window durations are first rounded to that
    many milliseconds (23.2 ms and 46.4 ms at the default configuration),
    which is the convention that reproduces the reference widths; ``width_ms_exact``
    always carries the unrounded value.  Height is n - 1 bin spacings plus
    two for the window main lobe.
    """
    if not 1 <= layer <= 5:
        raise ValueError(f"layer must be in 1..5, got {layer}")
    n = 3 * 2 ** (layer - 1)
    exact = ((n - 1) * hop + n_fft) / sr * 1000.0
    if ms_precision:
        hop_ms = round(hop / sr * 1000.0 / ms_precision) * ms_precision
        win_ms = round(n_fft / sr * 1000.0 / ms_precision) * ms_precision
        width = (n - 1) * hop_ms + win_ms
    else:
        width = exact
    height = ((n - 1) + 2) * (sr / n_fft)
    return RfEntry(layer, n, width, height, exact)


def exact_receptive_field(layer: int, pooled: bool = False) -> int:
    """Receptive field in input pixels from the 3x3-conv / 2x2-pool recurrence.

    Conv outputs see 3, 8, 18, 38, 78 pixels; pooled outputs 4, 10, 22, 46, 94.
    It bounds the support of a single-activation deconvolution.
    """
    if layer < 1:
        raise ValueError(f"layer must be >= 1, got {layer}")
    size, jump = 1, 1
    for i in range(layer):
        size += 2 * jump  # 3x3 conv
        if pooled or i < layer - 1:
            size += jump  # 2x2 pool
            jump *= 2
    return size


def rf_table(**stft_params) -> list[RfEntry]:
    return [effective_rf(l, **stft_params) for l in range(1, 6)]


def format_rf_table(entries: list[RfEntry]) -> str:
    lines = [f"{'layer':>5}  {'conv':>4}  {'width':>8}  {'height':>8}"]
    for e in entries:
        lines.append(f"{e.layer:>5}  {'3x3':>4}  {round(e.width_ms):>5} ms  {round(e.height_hz):>5} Hz")
    if len(entries) >= 5:
        e5 = entries[4]
        lines.append(
            f"note: layer-5 height computed as {round(e5.height_hz)} Hz; the reference "
            f"value is {REFERENCE_HEIGHT_HZ[4]} Hz, which the rule that reproduces layers 1-4 does not give"
        )
    return "\n".join(lines)


def write_rf_table(entries: list[RfEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "pixels_per_axis", "width_ms", "height_hz", "width_ms_exact"])
        for e in entries:
            w.writerow([e.layer, e.pixels_per_axis, repr(e.width_ms), repr(e.height_hz), repr(e.width_ms_exact)])


# ---------------------------------------------------------------------------
# Correlation
# ---------------------------------------------------------------------------


def pearson(a, b) -> float | None:
    """Product-moment correlation of two flattened maps; None if either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two values")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        return None
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def correlation_matrix(maps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs Pearson over rows of ``maps`` (n_items, n_values).

    Returns (matrix, valid) where ``valid[i]`` is False for zero-variance rows;
    entries involving such rows are NaN.
    """
    z = np.asarray(maps, dtype=np.float64)
    z = z - z.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    valid = norms > 0
    z[valid] /= norms[valid, None]
    corr = np.clip(z @ z.T, -1.0, 1.0)
    corr[~valid, :] = np.nan
    corr[:, ~valid] = np.nan
    return corr, valid


@dataclass(frozen=True)
class CorrelationRow:
    layer: int
    attribute: str
    mean: float
    std: float
    n_pairs: int
    n_skipped: int


@dataclass
class CorrelationReport:
    rows: list[CorrelationRow]
    pairs_per_cell: dict[str, int]
    cells_per_feature: dict[str, int]
    features_per_layer: dict[int, int]

    def row(self, layer: int, attribute: str) -> CorrelationRow:
        for r in self.rows:
            if r.layer == layer and r.attribute == attribute:
                return r
        raise KeyError((layer, attribute))


ATTRIBUTE_VALUES = {"key": tuple(KEYS), "chord": tuple(CHORDS), "instrument": INSTRUMENTS}


def attribute_cells(attribute: str) -> list[list[ModelSignalSpec]]:
    """Groups of specs that differ only in ``attribute``, in a fixed order."""
    if attribute not in ATTRIBUTE_VALUES:
        raise ValueError(f"attribute must be one of {ATTRIBUTES}, got {attribute!r}")
    others = [a for a in ("instrument", "chord", "key") if a != attribute]
    cells = []
    for fixed in itertools.product(*(ATTRIBUTE_VALUES[a] for a in others)):
        base = dict(zip(others, fixed))
        cells.append([ModelSignalSpec(**base, **{attribute: v}) for v in ATTRIBUTE_VALUES[attribute]])
    return cells


def _check_corpus(corpus) -> dict[ModelSignalSpec, AudioBuffer]:
    items = dict(corpus.items() if hasattr(corpus, "items") else corpus)
    missing = [s.name for s in all_specs() if s not in items]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise ValueError(f"corpus is missing {len(missing)} of 224 model signals: {shown}")
    return items


def compact_trace(model: CnnModel, buffer: AudioBuffer, n_fft: int = N_FFT, hop: int = HOP) -> ForwardTrace:
    """Inference trace keeping only what deconvolution needs (pooled maps and switches)."""
    x = prepare_input(stft(buffer, n_fft, hop).magnitude, model.dtype)
    full = forward(model, x[None])
    return ForwardTrace(pooled=full.pooled, switches=full.switches, logits=full.logits, probs=full.probs)


def correlation_study(
    model: CnnModel,
    corpus,
    attributes=ATTRIBUTES,
    layers=None,
    feature_chunk: int = 16,
    jobs: int = 1,
    n_fft: int = N_FFT,
    hop: int = HOP,
) -> CorrelationReport:
    """Per-layer mean/std of pairwise map correlations when one attribute varies.

    For every layer, feature and fixing of the two other attributes, every
    model signal in the cell is deconvolved (keep=all) and Pearson is taken
    over all pairs of flattened maps.  Pairs touching a zero-variance map are
    counted as skipped.  Aggregation runs in a fixed order, so results are
    reproducible bit for bit.
    """
    items = _check_corpus(corpus)
    attributes = tuple(attributes)
    for a in attributes:
        if a not in ATTRIBUTE_VALUES:
            raise ValueError(f"attribute must be one of {ATTRIBUTES}, got {a!r}")
    specs = all_specs()
    position = {s: i for i, s in enumerate(specs)}
    layers = list(range(1, len(model.conv_layers) + 1)) if layers is None else list(layers)

    pool = ThreadPoolExecutor(max_workers=jobs) if jobs > 1 else None
    mapper = pool.map if pool else map
    try:
        traces = list(mapper(lambda s: compact_trace(model, items[s], n_fft, hop), specs))

        cells = {a: [[position[s] for s in cell] for cell in attribute_cells(a)] for a in attributes}
        values = {(l, a): [] for l in layers for a in attributes}
        skipped = {(l, a): 0 for l in layers for a in attributes}
        n_values = int(np.prod(model.input_shape[1:]))
        for layer in layers:
            n_feat = model.conv_layers[layer - 1].out_ch
            for lo in range(0, n_feat, feature_chunk):
                feats = list(range(lo, min(lo + feature_chunk, n_feat)))
                maps = np.empty((len(feats), len(specs), n_values), dtype=model.dtype)

                def run(i):
                    maps[:, i] = deconv_layer(model, traces[i], layer, feats).reshape(len(feats), -1)

                list(mapper(run, range(len(specs))))
                for fi in range(len(feats)):
                    corr, _ = correlation_matrix(maps[fi])
                    for a in attributes:
                        for cell in cells[a]:
                            for i, j in itertools.combinations(cell, 2):
                                r = corr[i, j]
                                if np.isnan(r):
                                    skipped[layer, a] += 1
                                else:
                                    values[layer, a].append(r)
                log.info("layer %d features %d-%d done", layer, feats[0], feats[-1])
    finally:
        if pool:
            pool.shutdown()

    rows = []
    for layer in layers:
        for a in attributes:
            v = np.array(values[layer, a], dtype=np.float64)
            mean = float(v.mean()) if v.size else math.nan
            std = float(v.std()) if v.size else math.nan
            rows.append(CorrelationRow(layer, a, mean, std, int(v.size), skipped[layer, a]))
    return CorrelationReport(
        rows=rows,
        pairs_per_cell={a: math.comb(len(ATTRIBUTE_VALUES[a]), 2) for a in attributes},
        cells_per_feature={a: len(cells[a]) for a in attributes},
        features_per_layer={l: model.conv_layers[l - 1].out_ch for l in layers},
    )


def trend_summary(report: CorrelationReport) -> list[str]:
    """Informational: does chord/instrument correlation rise from the first to the last layer?"""
    lines = []
    layers = sorted({r.layer for r in report.rows})
    for a in ("chord", "instrument"):
        try:
            first, last = report.row(layers[0], a), report.row(layers[-1], a)
        except (KeyError, IndexError):
            continue
        rising = last.mean > first.mean
        lines.append(
            f"{a}: layer {first.layer} mean {first.mean:.3f} -> layer {last.layer} mean {last.mean:.3f} "
            f"({'rising' if rising else 'not rising'})"
        )
    return lines


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------

REPORT_COLUMNS = [f.name for f in fields(CorrelationRow)]


def _write_rows(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r.layer, r.attribute, repr(r.mean), repr(r.std), r.n_pairs, r.n_skipped])


def emit_report(report: CorrelationReport, out_dir) -> list[Path]:
    """Write ``correlation_{attribute}.csv`` per attribute and ``correlation_long.csv``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for a in ATTRIBUTES:
            rows = [r for r in report.rows if r.attribute == a]
            if rows:
                path = out_dir / f"correlation_{a}.csv"
                _write_rows(path, rows)
                written.append(path)
        path = out_dir / "correlation_long.csv"
        _write_rows(path, report.rows)
        written.append(path)
    except OSError as exc:
        raise OSError(f"cannot write report under {out_dir}: {exc}") from exc
    return written


def read_report_rows(path) -> list[CorrelationRow]:
    with open(path, newline="") as fh:
        return [
            CorrelationRow(
                int(r["layer"]), r["attribute"], float(r["mean"]), float(r["std"]),
                int(r["n_pairs"]), int(r["n_skipped"]),
            )
            for r in csv.DictReader(fh)
        ]
