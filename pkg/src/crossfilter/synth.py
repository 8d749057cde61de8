"""Synthetic bi-quality audio datasets with known ground truth.

Each class is a sound archetype (steady tone, chirp, noise burst, ...) with
its own base frequency; clips add random placement, jitter and background
noise.  Curated labels are always correct; noisy labels are corrupted with
a controllable rate, and the true labels are kept for auditing.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, sosfilt

from .data import BiQualityDataset, Item, write_manifest
from .dsp import AudioClip, DEFAULT_SR
from .errors import AudioReadError, ConfigError

ARCHETYPES = ("tone", "chirp", "burst", "am", "clicks", "harmonic", "vibrato", "pluck")


@dataclass(frozen=True)
class SynthSpec:
    J: int = 8
    n_curated: int = 25  # per class
    n_noisy: int = 100  # per class
    n_test: int = 50  # per class
    noise_ratio: float = 0.4
    min_seconds: float = 1.0
    max_seconds: float = 6.0
    sample_rate: int = DEFAULT_SR
    snr_db: tuple[float, float] = (-6.0, 6.0)
    freq_jitter: float = 0.15  # log-spread of each clip's pitch; above ~0.16 neighbouring classes overlap
    multilabel: bool = False
    second_label_prob: float = 0.3  # multilabel only
    noise_mode: str = "symmetric"  # symmetric | confusion
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.noise_ratio < 1:
            raise ConfigError(f"noise_ratio={self.noise_ratio} outside [0, 1)")
        if self.J < 2:
            raise ConfigError(f"J={self.J} must be >= 2")
        if not 0 < self.min_seconds <= self.max_seconds:
            raise ConfigError("need 0 < min_seconds <= max_seconds")
        if self.noise_mode not in ("symmetric", "confusion"):
            raise ConfigError(f"noise_mode={self.noise_mode!r} unknown")
        for name in ("n_curated", "n_noisy", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def class_names(J: int) -> list[str]:
    return [f"{ARCHETYPES[j % len(ARCHETYPES)]}{j // len(ARCHETYPES) or ''}" for j in range(J)]


def base_frequency(j: int, J: int) -> float:
    # spread over 100-1000 Hz so both mel and CQT (top bin ~1.24 kHz) see every class
    return float(100.0 * 10.0 ** ((j * 5 % J) / max(1, J - 1)))


def _envelope(n: int, sr: int, attack: float = 0.01) -> np.ndarray:
    a = min(n // 2, max(1, int(attack * sr)))
    env = np.ones(n)
    env[:a] = np.linspace(0, 1, a)
    env[-a:] = np.linspace(1, 0, a)
    return env


def _event(j: int, J: int, n: int, sr: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    """One event of class ``j`` lasting ``n`` samples, unit peak-ish amplitude."""
    t = np.arange(n) / sr
    f0 = base_frequency(j, J) * float(np.exp(rng.uniform(-jitter, jitter)))
    phase = rng.uniform(0, 2 * np.pi)
    kind = ARCHETYPES[j % len(ARCHETYPES)]
    if kind == "tone":
        x = np.sin(2 * np.pi * f0 * t + phase)
    elif kind == "chirp":
        f1 = f0 * rng.uniform(1.6, 2.4)
        dur = max(t[-1], 1e-3)
        x = np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t**2 / dur) + phase)
    elif kind == "burst":
        sos = butter(4, [f0 * 0.7, min(f0 * 1.4, sr / 2 * 0.95)], btype="band", fs=sr, output="sos")
        x = sosfilt(sos, rng.standard_normal(n))
        gate = (np.sin(2 * np.pi * rng.uniform(2, 5) * t + phase) > 0).astype(float)
        x = 3.0 * x * gate
    elif kind == "am":
        fm = rng.uniform(6, 14)
        x = np.sin(2 * np.pi * f0 * t + phase) * (0.5 + 0.5 * np.sin(2 * np.pi * fm * t))
    elif kind == "clicks":
        x = np.zeros(n)
        period = max(1, int(sr / rng.uniform(8, 20)))
        x[int(rng.integers(0, period)) :: period] = 1.0
        decay = np.exp(-np.arange(int(0.02 * sr)) / (0.003 * sr))
        resonator = decay * np.sin(2 * np.pi * f0 * np.arange(decay.size) / sr)
        x = np.convolve(x, resonator)[:n] * 2.0
    elif kind == "harmonic":
        x = sum(np.sin(2 * np.pi * f0 * h * t + phase * h) / h for h in (1, 2, 3, 4))
    elif kind == "vibrato":
        depth, rate = rng.uniform(0.03, 0.08), rng.uniform(4, 8)
        inst = f0 * (1 + depth * np.sin(2 * np.pi * rate * t))
        x = np.sin(2 * np.pi * np.cumsum(inst) / sr + phase)
    else:  # pluck: short decaying tone
        x = np.sin(2 * np.pi * f0 * t + phase) * np.exp(-t / rng.uniform(0.05, 0.15))
    return x * _envelope(n, sr)


_LOWPASS: dict[int, np.ndarray] = {}


def _lowpass(sr: int) -> np.ndarray:
    _LOWPASS[sr] = butter(2, 1500.0, btype="low", fs=sr, output="sos")
    return _LOWPASS[sr]


def synthesize_clip(labels: tuple[int, ...], spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    sr = spec.sample_rate
    n = int(round(rng.uniform(spec.min_seconds, spec.max_seconds) * sr))
    signal = np.zeros(n)
    for j in labels:
        length = int(n * rng.uniform(0.4, 1.0))
        start = int(rng.integers(0, n - length + 1))
        ev = _event(j, spec.J, length, sr, rng, spec.freq_jitter)
        signal[start : start + length] += ev / (np.sqrt(np.mean(ev**2)) + 1e-12)
    ev_rms = np.sqrt(np.mean(signal**2)) + 1e-12
    snr = rng.uniform(*spec.snr_db)
    white = rng.standard_normal(n)
    # background weighted towards the low band where the events live
    noise = sosfilt(_LOWPASS[sr] if sr in _LOWPASS else _lowpass(sr), white) + 0.1 * white
    noise *= ev_rms / (np.sqrt(np.mean(noise**2)) + 1e-12) * 10 ** (-snr / 20)
    x = signal + noise
    # fixed RMS keeps level from depending on crest factor; peaks rarely clip
    return np.clip(0.1 * x / (np.sqrt(np.mean(x**2)) + 1e-12), -1.0, 1.0)


def inject_label_noise(labels, eps: float, J: int, rng: np.random.Generator,
                       mode: str = "symmetric", confusion: np.ndarray | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Replace each label with probability ``eps`` by a different class.

    ``symmetric`` draws the new class uniformly among the other ``J - 1``;
    ``confusion`` draws it from row ``y`` of ``confusion`` (diagonal ignored),
    defaulting to the two neighbouring archetypes.  Returns ``(labels, mask)``.
    """
    if not 0 <= eps < 1:
        raise ConfigError(f"noise ratio {eps} outside [0, 1)")
    labels = np.asarray(labels, dtype=np.int64)
    mask = rng.random(labels.size) < eps
    out = labels.copy()
    if mode == "symmetric":
        shift = rng.integers(1, J, size=labels.size)
        out[mask] = (labels[mask] + shift[mask]) % J
    elif mode == "confusion":
        if confusion is None:
            confusion = np.zeros((J, J))
            for j in range(J):
                confusion[j, (j - 1) % J] += 0.5
                confusion[j, (j + 1) % J] += 0.5
        conf = np.array(confusion, dtype=np.float64)
        np.fill_diagonal(conf, 0.0)
        conf /= conf.sum(axis=1, keepdims=True)
        for i in np.flatnonzero(mask):
            out[i] = rng.choice(J, p=conf[labels[i]])
    else:
        raise ConfigError(f"unknown noise mode {mode!r}")
    return out, mask


def _clip_rng(seed: int, subset: str, index: int) -> np.random.Generator:
    code = {"curated": 0, "noisy": 1, "test": 2}[subset]
    return np.random.default_rng([seed, code, index])


def plan(spec: SynthSpec) -> BiQualityDataset:
    """Items (ids, given and true labels) without audio; deterministic in ``spec.seed``."""
    rng = np.random.default_rng([spec.seed, 99])
    classes = class_names(spec.J)
    subsets: dict[str, list[Item]] = {}
    for subset, per_class in (("curated", spec.n_curated), ("noisy", spec.n_noisy), ("test", spec.n_test)):
        true = np.repeat(np.arange(spec.J), per_class)
        true_sets = []
        for y in true:
            labels = [int(y)]
            if spec.multilabel and rng.random() < spec.second_label_prob:
                labels.append(int((y + rng.integers(1, spec.J)) % spec.J))
            true_sets.append(tuple(labels))
        given = [list(s) for s in true_sets]
        if subset == "noisy" and len(true):
            primary, _ = inject_label_noise(true, spec.noise_ratio, spec.J, rng, spec.noise_mode)
            for g, p in zip(given, primary):
                if g[0] != p:
                    g[:] = [int(p)] + [v for v in g[1:] if v != p]
        subsets[subset] = [
            Item(f"{subset[0]}{i:05d}", tuple(g), "", t) for i, (g, t) in enumerate(zip(given, true_sets))
        ]
    return BiQualityDataset(classes, subsets["curated"], subsets["noisy"], subsets["test"])


def iter_clips(dataset: BiQualityDataset, spec: SynthSpec) -> Iterator[tuple[Item, AudioClip]]:
    """Synthesise audio for every planned item, one at a time."""
    for subset in ("curated", "noisy", "test"):
        for i, it in enumerate(getattr(dataset, subset)):
            rng = _clip_rng(spec.seed, subset, i)
            x = synthesize_clip(it.true_labels, spec, rng)
            yield it, AudioClip(to_pcm16(x) / 32768.0, spec.sample_rate, it.clip_id)


def to_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    wavfile.write(str(path), clip.sample_rate, to_pcm16(clip.samples))


def read_wav(path: str | Path, clip_id: str = "") -> AudioClip:
    """Read a WAV file as a mono float clip in [-1, 1]."""
    try:
        sr, data = wavfile.read(str(path))
    except Exception as exc:  # scipy raises ValueError / EOFError on junk
        raise AudioReadError(clip_id or str(path), f"unreadable WAV ({exc})") from None
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        x = data / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128) / 128.0
    else:
        x = data.astype(np.float64)
    if x.size == 0:
        raise AudioReadError(clip_id or str(path), "no samples")
    return AudioClip(x, int(sr), clip_id)


def generate(spec: SynthSpec, out_dir: str | Path) -> tuple[BiQualityDataset, Path, Path]:
    """Write WAVs plus ``manifest.csv`` and ``ground_truth.csv`` under ``out_dir``."""
    out = Path(out_dir)
    audio_dir = out / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    dataset = plan(spec)
    placed: dict[str, str] = {}
    for it, clip in iter_clips(dataset, spec):
        path = audio_dir / f"{it.clip_id}.wav"
        write_wav(path, clip)
        placed[it.clip_id] = str(path)

    def with_path(items):
        return [Item(it.clip_id, it.labels, placed[it.clip_id], it.true_labels) for it in items]

    dataset = BiQualityDataset(dataset.classes, with_path(dataset.curated), with_path(dataset.noisy),
                               with_path(dataset.test))
    manifest, truth = out / "manifest.csv", out / "ground_truth.csv"
    write_manifest(manifest, dataset)
    write_manifest(truth, dataset, truth=True)
    return dataset, manifest, truth


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(map(str, paths)):
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def nearest_centroid_accuracy(train_x: np.ndarray, train_y: np.ndarray,
                              test_x: np.ndarray, test_y: np.ndarray) -> float:
    """Accuracy of a nearest-class-mean classifier (Euclidean) on fixed-length features."""
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    classes = np.unique(train_y)
    cents = np.stack([train_x[train_y == c].mean(axis=0) for c in classes])
    d = ((test_x[:, None, :] - cents[None]) ** 2).sum(axis=2)
    return float(np.mean(classes[np.argmin(d, axis=1)] == test_y))
