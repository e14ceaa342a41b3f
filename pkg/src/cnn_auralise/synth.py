"""Additive-synthesis model signals and a synthetic 3-class genre dataset."""

from __future__ import annotations

import configparser
import csv
import itertools
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dsp import HOP, N_FFT, SAMPLE_RATE, AudioBuffer, stft, write_wav

INSTRUMENTS = (
    "pure_sine",
    "strings",
    "acoustic_guitar",
    "saxophone",
    "piano",
    "electric_guitar",
    "organ",
)
CHORDS = {
    "intervals": (0, 7),
    "major": (0, 4, 7),
    "minor": (0, 3, 7),
    "sus4": (0, 5, 7),
    "dominant7": (0, 4, 7, 10),
    "major7": (0, 4, 7, 11),
    "minor7": (0, 3, 7, 10),
    "diminished": (0, 3, 6),
}
KEYS = {"Eb2": 39, "Bb2": 46, "A3": 57, "G4": 67}

CLIP_SECONDS = 4.0
N_HITS = 6
PEAK = 0.8


@dataclass(frozen=True)
class Timbre:
    harmonics: tuple[float, ...]
    attack: float
    decay: float
    sustain: float
    release: float


@lru_cache(maxsize=None)
def load_timbres(path: str | None = None) -> dict[str, Timbre]:
    parser = configparser.ConfigParser()
    if path is None:
        parser.read_string(resources.files(__package__).joinpath("data/timbres.ini").read_text())
    else:
        parser.read(path)
    timbres = {}
    for name in parser.sections():
        harmonics = tuple(float(v) for v in parser[name]["harmonics"].split(","))
        a, d, s, r = (float(v) for v in parser[name]["adsr"].split(","))
        timbres[name] = Timbre(harmonics, a, d, s, r)
    return timbres


def note_freq(midi: int) -> float:
    """Equal temperament, A4 (MIDI 69) = 440 Hz."""
    if not 0 <= midi <= 127:
        raise ValueError(f"MIDI note {midi} outside 0..127")
    return 440.0 * 2.0 ** ((midi - 69) / 12.0)


def chord_notes(chord: str, root_midi: int) -> set[int]:
    try:
        intervals = CHORDS[chord]
    except KeyError:
        raise ValueError(f"unknown chord {chord!r}; expected one of {sorted(CHORDS)}") from None
    return {root_midi + i for i in intervals}


def adsr_envelope(n: int, timbre: Timbre, sr: int) -> np.ndarray:
    """Linear ADSR over n samples; the release ends exactly at the last sample."""
    a, d, r = (max(0, int(round(t * sr))) for t in (timbre.attack, timbre.decay, timbre.release))
    if a + d + r > n:
        scale = n / (a + d + r)
        a, d, r = int(a * scale), int(d * scale), int(r * scale)
    s_len = n - a - d - r
    env = np.concatenate(
        [
            np.linspace(0.0, 1.0, a, endpoint=False),
            np.linspace(1.0, timbre.sustain, d, endpoint=False),
            np.full(s_len, timbre.sustain),
            np.linspace(timbre.sustain, 0.0, r),
        ]
    )
    return env


def _flush(x: np.ndarray) -> np.ndarray:
    x[np.abs(x) < 1e-30] = 0.0
    return x


def _additive(instrument: str, notes, n: int, sr: int) -> np.ndarray:
    timbres = load_timbres()
    if instrument not in timbres:
        raise ValueError(f"unknown instrument {instrument!r}; expected one of {sorted(timbres)}")
    notes = sorted(notes)
    if not notes:
        raise ValueError("note set is empty")
    timbre = timbres[instrument]
    t = np.arange(n) / sr
    out = np.zeros(n)
    for midi in notes:
        f0 = note_freq(midi)
        for h, amp in enumerate(timbre.harmonics, start=1):
            if amp == 0.0 or h * f0 >= sr / 2:
                continue
            out += amp * np.sin(2.0 * np.pi * h * f0 * t)
    return out * adsr_envelope(n, timbre, sr)


def _normalise(x: np.ndarray, peak: float = PEAK) -> np.ndarray:
    m = np.max(np.abs(x))
    return _flush(x * (peak / m)) if m > 0 else x


def render_instrument(instrument: str, notes, duration_s: float, sr: int = SAMPLE_RATE) -> AudioBuffer:
    """One block-chord hit: summed harmonic partials under the instrument's ADSR, peak 0.8."""
    n = int(round(duration_s * sr))
    return AudioBuffer(_normalise(_additive(instrument, notes, n, sr)), sr)


# ---------------------------------------------------------------------------
# Model signals
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ModelSignalSpec:
    instrument: str
    chord: str
    key: str

    def __post_init__(self):
        if self.instrument not in INSTRUMENTS:
            raise ValueError(f"unknown instrument {self.instrument!r}")
        if self.chord not in CHORDS:
            raise ValueError(f"unknown chord {self.chord!r}")
        if self.key not in KEYS:
            raise ValueError(f"unknown key {self.key!r}")

    @property
    def name(self) -> str:
        return f"{self.instrument}_{self.chord}_{self.key}"


def all_specs() -> list[ModelSignalSpec]:
    return [ModelSignalSpec(i, c, k) for i, c, k in itertools.product(INSTRUMENTS, CHORDS, KEYS)]


def voicings(notes, n: int = N_HITS) -> list[list[int]]:
    """Root position, then successive inversions: each step lifts the lowest note an octave."""
    current = sorted(notes)
    out = []
    for _ in range(n):
        out.append(list(current))
        current = sorted(current[1:] + [current[0] + 12])
    return out


def model_signal(spec: ModelSignalSpec, sr: int = SAMPLE_RATE) -> AudioBuffer:
    """4 s of six equal-length hits of the chord at stepped voicings, peak 0.8."""
    total = int(round(CLIP_SECONDS * sr))
    bounds = np.linspace(0, total, N_HITS + 1).round().astype(int)
    notes = chord_notes(spec.chord, KEYS[spec.key])
    hits = [
        _additive(spec.instrument, voicing, hi - lo, sr)
        for voicing, lo, hi in zip(voicings(notes), bounds[:-1], bounds[1:])
    ]
    return AudioBuffer(_normalise(np.concatenate(hits)), sr)


def corpus(sr: int = SAMPLE_RATE):
    """Yield (spec, buffer) for all 224 model signals in a fixed order."""
    for spec in all_specs():
        yield spec, model_signal(spec, sr)


def write_corpus(out_dir, sr: int = SAMPLE_RATE) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "instrument", "chord", "key", "root_midi", "notes"])
        for spec, buf in corpus(sr):
            path = out_dir / f"{spec.name}.wav"
            write_wav(path, buf)
            paths.append(path)
            notes = " ".join(str(n) for n in sorted(chord_notes(spec.chord, KEYS[spec.key])))
            writer.writerow([path.name, spec.instrument, spec.chord, spec.key, KEYS[spec.key], notes])
    return paths


def read_corpus_manifest(corpus_dir) -> list[tuple[ModelSignalSpec, Path]]:
    corpus_dir = Path(corpus_dir)
    with open(corpus_dir / "manifest.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(ModelSignalSpec(r["instrument"], r["chord"], r["key"]), corpus_dir / r["file"]) for r in rows]


# ---------------------------------------------------------------------------
# Synthetic genre dataset
# ---------------------------------------------------------------------------

GENRE_CLASSES = ("percussive", "harmonic", "mixed")


@dataclass(frozen=True)
class GenreDatasetSpec:
    clips_per_class: int = 50
    clip_seconds: float = CLIP_SECONDS
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    classes: tuple[str, ...] = GENRE_CLASSES
    n_fft: int = N_FFT
    hop: int = HOP


@dataclass
class LabeledDataset:
    spectrograms: np.ndarray  # (N, bins, frames) linear magnitude, float32
    labels: np.ndarray  # (N,) int
    class_names: tuple[str, ...] = GENRE_CLASSES

    def __len__(self):
        return len(self.labels)

    def save(self, path) -> None:
        np.savez_compressed(
            path,
            spectrograms=self.spectrograms,
            labels=self.labels,
            class_names=np.array(self.class_names),
        )

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        with np.load(path) as z:
            return cls(z["spectrograms"], z["labels"], tuple(str(c) for c in z["class_names"]))


def _percussion(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Band-passed noise bursts with exponential decay on an eighth-note grid."""
    bpm = rng.uniform(90, 140)
    step = int(sr * 30.0 / bpm)
    out = np.zeros(n)
    for start in range(int(rng.integers(0, step)), n, step):
        if rng.random() > 0.75:
            continue
        length = min(int(sr * rng.uniform(0.08, 0.2)), n - start)
        low = rng.uniform(300, 2000)
        high = min(low * rng.uniform(2.0, 4.0), 0.45 * sr)
        sos = sps.butter(4, [low, high], btype="bandpass", fs=sr, output="sos")
        burst = sps.sosfilt(sos, rng.standard_normal(length))
        tau = rng.uniform(0.015, 0.05) * sr
        out[start : start + length] += rng.uniform(0.4, 1.0) * burst * np.exp(-np.arange(length) / tau)
    return out


def _pad(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Sustained chords, one to three changes per clip."""
    n_chords = int(rng.integers(1, 4))
    bounds = np.linspace(0, n, n_chords + 1).round().astype(int)
    instrument = ("strings", "organ", "saxophone")[int(rng.integers(0, 3))]
    names = sorted(CHORDS)
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        chord = names[int(rng.integers(0, len(names)))]
        root = int(rng.integers(45, 65))
        parts.append(_additive(instrument, chord_notes(chord, root), hi - lo, sr))
    return np.concatenate(parts)


def _bass(rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    """Pitched quarter-note bass pulses."""
    bpm = rng.uniform(90, 140)
    step = int(sr * 60.0 / bpm)
    root = int(rng.integers(28, 41))
    out = np.zeros(n)
    for start in range(0, n, step):
        length = min(step, n - start)
        t = np.arange(length) / sr
        f = note_freq(root + int(rng.choice([0, 0, 5, 7, 12])))
        tone = np.sin(2 * np.pi * f * t) + 0.4 * np.sin(4 * np.pi * f * t)
        out[start : start + length] += tone * np.exp(-t / 0.15)
    return out


def genre_clip(label: int, rng: np.random.Generator, n: int, sr: int) -> np.ndarray:
    if label == 0:
        x = _percussion(rng, n, sr)
    elif label == 1:
        x = _pad(rng, n, sr)
    elif label == 2:
        parts = [_pad(rng, n, sr), _percussion(rng, n, sr), _bass(rng, n, sr)]
        x = sum(p / max(np.max(np.abs(p)), 1e-12) for p in parts)
    else:
        raise ValueError(f"label must be 0, 1 or 2, got {label}")
    return _normalise(x, rng.uniform(0.3, 0.9))


def generate_genre_dataset(spec: GenreDatasetSpec) -> LabeledDataset:
    """Labelled magnitude spectrograms, classes interleaved, deterministic per seed."""
    if spec.clips_per_class < 1:
        raise ValueError("clips_per_class must be >= 1")
    n = int(round(spec.clip_seconds * spec.sample_rate))
    n_classes = len(spec.classes)
    children = np.random.SeedSequence(spec.seed).spawn(spec.clips_per_class * n_classes)
    mags, labels = [], []
    for i, child in enumerate(children):
        label = i % n_classes
        x = genre_clip(label, np.random.default_rng(child), n, spec.sample_rate)
        mags.append(stft(AudioBuffer(x, spec.sample_rate), spec.n_fft, spec.hop).magnitude.astype(np.float32))
        labels.append(label)
    return LabeledDataset(np.stack(mags), np.array(labels, dtype=np.int64), tuple(spec.classes))
