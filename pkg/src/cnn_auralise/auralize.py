"""Turn deconvolved spectrogram maps into audio by reusing the analysis phase."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .deconv import DeconvolvedMap, DeconvRequest, InvalidRequest, deconv_feature, write_map_binary
from .dsp import HOP, N_FFT, AudioBuffer, ComplexSpectrogram, StftParams, istft, read_wav, stft, write_wav
from .nn import forward, load_model, prepare_input

log = logging.getLogger(__name__)

TARGET_PEAK = 0.9


class PipelineError(RuntimeError):
    """Some requests failed; the others were still processed and written.

    ``results`` holds the successful outputs and ``failures`` maps each
    failed request label to its error message.
    """

    def __init__(self, results, failures):
        self.results = results
        self.failures = failures
        detail = "; ".join(f"{k}: {v}" for k, v in failures.items())
        super().__init__(f"{len(failures)} request(s) failed: {detail}")


@dataclass(frozen=True)
class AuralisationResult:
    audio: AudioBuffer
    source: DeconvRequest | None
    energy_ratio: float  # energy before peak normalisation / energy of the input signal

    def __post_init__(self):
        if not np.all(np.isfinite(self.audio.samples)):
            raise ValueError("audio must be finite")
        if not self.energy_ratio >= 0:
            raise ValueError(f"energy_ratio must be >= 0, got {self.energy_ratio}")


def _map_values(map) -> np.ndarray:
    return np.asarray(map.values if isinstance(map, DeconvolvedMap) else map, dtype=np.float64)


def reconstruct(map, phase: np.ndarray, stft_params: StftParams | None = None, rectify: bool = False) -> AudioBuffer:
    """Inverse STFT of ``map * exp(i * phase)`` with no loudness handling.

    Negative map values are kept (a sign flip is a half-turn of phase) unless
    ``rectify`` clamps them to zero.
    """
    p = stft_params or StftParams()
    values = _map_values(map)
    phase = np.asarray(phase, dtype=np.float64)
    if values.shape != phase.shape:
        raise ValueError(f"map shape {values.shape} does not match phase shape {phase.shape}")
    if rectify:
        values = np.maximum(values, 0.0)
    # a signed magnitude is not a valid ComplexSpectrogram magnitude, so fold the sign into the phase
    spec = ComplexSpectrogram(np.abs(values), np.where(values < 0, phase + np.pi, phase), p.n_fft, p.hop, p.sample_rate)
    return istft(spec)


def peak_normalise(buffer: AudioBuffer, target: float = TARGET_PEAK) -> AudioBuffer:
    """Scale to ``target`` peak only when the peak exceeds 1."""
    peak = float(np.max(np.abs(buffer.samples))) if len(buffer) else 0.0
    if peak <= 1.0:
        return buffer
    return AudioBuffer(buffer.samples * (target / peak), buffer.sample_rate)


def auralise(map, phase: np.ndarray, stft_params: StftParams | None = None, rectify: bool = False) -> AudioBuffer:
    """Audio for a deconvolved map: phase reinjection, inverse STFT, peak normalisation."""
    return peak_normalise(reconstruct(map, phase, stft_params, rectify))


def auralise_pipeline(
    model_path,
    wav_path,
    requests,
    out_dir,
    rectify: bool = False,
    jobs: int = 1,
    n_fft: int = N_FFT,
    hop: int = HOP,
) -> list[AuralisationResult]:
    """Load a model and a WAV, then write ``layer{l}_feat{f}.wav`` and ``.dmap`` per request.

    Invalid requests do not stop the others; after every request has been
    handled a :class:`PipelineError` lists the failures.
    """
    model_path, wav_path, out_dir = Path(model_path), Path(wav_path), Path(out_dir)
    requests = list(requests)
    model = load_model(model_path)
    buffer = read_wav(wav_path)
    params = StftParams(n_fft, hop, buffer.sample_rate)
    spec = stft(buffer, params.n_fft, params.hop)
    expected = model.input_shape[1:]
    if spec.shape != expected:
        raise ValueError(
            f"{wav_path}: spectrogram shape {spec.shape} does not match model input {expected}"
        )
    phase = spec.phase
    if not np.array_equal(phase, stft(buffer, params.n_fft, params.hop).phase):
        raise AssertionError("analysis phase is not reproducible")
    if not requests:
        return []
    out_dir.mkdir(parents=True, exist_ok=True)
    trace = forward(model, prepare_input(spec.magnitude, model.dtype)[None])
    input_energy = float(np.sum(buffer.samples**2))

    def run(req: DeconvRequest):
        dmap = deconv_feature(model, trace, req)
        raw = reconstruct(dmap, phase, params, rectify)
        energy = float(np.sum(raw.samples**2))
        ratio = energy / input_energy if input_energy > 0 else 0.0
        audio = peak_normalise(raw)
        try:
            write_wav(out_dir / f"{req.label}.wav", audio)
            write_map_binary(out_dir / f"{req.label}.dmap", dmap.values)
        except OSError as exc:
            raise OSError(f"cannot write outputs for {req.label} under {out_dir}: {exc}") from exc
        return AuralisationResult(audio, req, ratio)

    def guarded(req):
        try:
            return run(req), None
        except InvalidRequest as exc:
            return None, str(exc)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(guarded, requests))
    else:
        outcomes = [guarded(r) for r in requests]

    results, failures = [], {}
    for req, (result, err) in zip(requests, outcomes):
        if err is None:
            results.append(result)
        else:
            log.warning("request %s failed: %s", req.label, err)
            failures[req.label] = err
    if failures:
        raise PipelineError(results, failures)
    return results
