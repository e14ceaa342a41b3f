"""STFT analysis/synthesis and 16-bit PCM WAV I/O.

Frames start at sample 0 (no centering or padding), the window is a periodic
Hann, and magnitudes are kept on a linear scale so that a modified magnitude
grid can be recombined with the analysis phase and inverted directly.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 11025
N_FFT = 512
HOP = 256
# istft divides by the squared-window envelope but never by less than this
ENVELOPE_FLOOR = 0.1


class WavFormatError(ValueError):
    """Raised for malformed or unsupported WAV files."""


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StftParams:
    n_fft: int = N_FFT
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft % 2:
            raise ValueError(f"n_fft must be even and >= 2, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in 1..n_fft, got {self.hop}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Magnitude/phase grid of shape (n_fft // 2 + 1, n_frames)."""

    magnitude: np.ndarray
    phase: np.ndarray
    n_fft: int = N_FFT
    hop: int = HOP
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        mag = np.asarray(self.magnitude, dtype=np.float64)
        phase = np.asarray(self.phase, dtype=np.float64)
        if mag.ndim != 2 or mag.shape != phase.shape:
            raise ValueError(
                f"magnitude {mag.shape} and phase {phase.shape} must be equal 2-D shapes"
            )
        if mag.shape[0] != self.n_fft // 2 + 1:
            raise ValueError(
                f"expected {self.n_fft // 2 + 1} bins for n_fft={self.n_fft}, got {mag.shape[0]}"
            )
        if not (np.all(np.isfinite(mag)) and np.all(np.isfinite(phase))):
            raise ValueError("spectrogram entries must be finite")
        object.__setattr__(self, "magnitude", mag)
        object.__setattr__(self, "phase", phase)

    @property
    def shape(self) -> tuple[int, int]:
        return self.magnitude.shape

    @property
    def n_bins(self) -> int:
        return self.magnitude.shape[0]

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[1]

    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


# ---------------------------------------------------------------------------
# Window
# ---------------------------------------------------------------------------


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window, w[k] = 0.5 * (1 - cos(2 pi k / n))."""
    if n < 2 or n % 2:
        raise ValueError(f"window length must be even and >= 2, got {n}")
    k = np.arange(n)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))


def n_frames_for(length: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    if length < n_fft:
        raise ValueError(f"signal of {length} samples is shorter than n_fft={n_fft}")
    return (length - n_fft) // hop + 1


def signal_length_for(n_frames: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    return (n_frames - 1) * hop + n_fft


# ---------------------------------------------------------------------------
# Analysis / synthesis
# ---------------------------------------------------------------------------


def stft(signal: AudioBuffer, n_fft: int = N_FFT, hop: int | None = None) -> ComplexSpectrogram:
    hop = n_fft // 2 if hop is None else hop
    if hop <= 0 or hop > n_fft:
        raise ValueError(f"hop must be in 1..n_fft, got {hop}")
    x = signal.samples
    n_frames = n_frames_for(len(x), n_fft, hop)
    window = hann_window(n_fft)
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]
    spec = np.fft.rfft(frames * window, axis=1).T
    return ComplexSpectrogram(
        magnitude=np.abs(spec),
        phase=np.angle(spec),
        n_fft=n_fft,
        hop=hop,
        sample_rate=signal.sample_rate,
    )


def window_envelope(n_frames: int, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Overlap-added squared window; the istft normalisation curve."""
    w2 = hann_window(n_fft) ** 2
    env = np.zeros(signal_length_for(n_frames, n_fft, hop))
    for t in range(n_frames):
        env[t * hop : t * hop + n_fft] += w2
    return env


def istft(spec: ComplexSpectrogram) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`.

    Each frame is inverse transformed, multiplied by the synthesis window and
    overlap-added; the sum is divided by the squared-window envelope, floored
    at ``ENVELOPE_FLOOR``.  Only the first and last ~n_fft/5 samples fall
    under the floor: there the output is tapered rather than amplified, which
    keeps grids that are not the STFT of any signal (deconvolved maps) from
    blowing up at the edges.  From n_fft/4 inwards reconstruction is exact.
    """
    n_fft, hop = spec.n_fft, spec.hop
    if spec.n_bins != n_fft // 2 + 1:
        raise ValueError(f"spectrogram has {spec.n_bins} bins, n_fft={n_fft} needs {n_fft // 2 + 1}")
    if spec.n_frames < 1:
        raise ValueError("spectrogram has no frames")
    window = hann_window(n_fft)
    frames = np.fft.irfft(spec.complex().T, n=n_fft, axis=1) * window
    out = np.zeros(signal_length_for(spec.n_frames, n_fft, hop))
    for t in range(spec.n_frames):
        out[t * hop : t * hop + n_fft] += frames[t]
    out /= np.maximum(window_envelope(spec.n_frames, n_fft, hop), ENVELOPE_FLOOR)
    return AudioBuffer(out, spec.sample_rate)


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    reference = np.asarray(reference, dtype=np.float64)
    noise = reference - np.asarray(estimate, dtype=np.float64)
    signal_energy = float(np.sum(reference**2))
    noise_energy = float(np.sum(noise**2))
    if noise_energy == 0.0:
        return float("inf")
    return 10.0 * np.log10(signal_energy / noise_energy)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def write_wav(path, buffer: AudioBuffer) -> None:
    """Write 16-bit little-endian PCM mono; samples are clamped to [-1, 1]."""
    path = Path(path)
    pcm = np.round(np.clip(buffer.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(buffer.sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path) -> AudioBuffer:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as r:
            n_channels = r.getnchannels()
            width = r.getsampwidth()
            rate = r.getframerate()
            n_frames = r.getnframes()
            raw = r.readframes(n_frames)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    if width != 2:
        raise WavFormatError(f"{path}: unsupported bit depth {8 * width} (only 16-bit PCM)")
    usable = len(raw) - len(raw) % (2 * n_channels)
    data = np.frombuffer(raw[:usable], dtype="<i2").astype(np.float64)
    if data.size // n_channels != n_frames:
        raise WavFormatError(f"{path}: data chunk truncated ({data.size // n_channels} of {n_frames} frames)")
    data = data.reshape(-1, n_channels).mean(axis=1) / 32767.0
    return AudioBuffer(np.clip(data, -1.0, 1.0), rate)
