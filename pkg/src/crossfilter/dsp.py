"""Time-frequency representations: Spec, Logmel, MFCC and CQT.

Frame convention (shared by every representation): frames are centred, the
``i``-th frame is centred on sample ``round(i * hop_samples)`` of the
zero-padded signal, and a clip of ``n`` samples yields
``ceil(n / hop_samples)`` frames.  A 4 s clip at 44.1 kHz with a 5 ms hop
therefore gives exactly 800 frames, and with a 256-sample CQT hop
``ceil(176400 / 256) = 690`` frames.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct, idct
from scipy.signal import get_window, resample_poly

from .errors import ClipTooShort, CrossFilterError

DEFAULT_SR = 44100


class RepKind(enum.IntEnum):
    SPEC = 0
    LOGMEL = 1
    MFCC = 2
    CQT = 3

    @classmethod
    def parse(cls, value: "RepKind | str | int") -> "RepKind":
        if isinstance(value, RepKind):
            return value
        if isinstance(value, str):
            return cls[value.strip().upper()]
        return cls(value)


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR
    clip_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size < 1:
            raise ValueError("clip has no samples")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError(f"clip {self.clip_id!r} has non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class TimeFreqRep:
    values: np.ndarray  # [n_bins, n_frames]
    kind: RepKind
    hop_seconds: float
    clip_id: str = ""
    log_floor: float = 1e-10

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def silence(self) -> np.ndarray:
        """Column vector a silent frame maps to (used for padding and masking)."""
        return silence_column(self.kind, self.n_bins, self.log_floor)

    def replace(self, values: np.ndarray) -> "TimeFreqRep":
        return TimeFreqRep(values, self.kind, self.hop_seconds, self.clip_id, self.log_floor)


@dataclass(frozen=True)
class FrameConfig:
    frame_width_seconds: float = 0.100
    hop_seconds: float = 0.005
    cqt_hop_samples: int = 256
    n_bins: int = 64
    log_floor: float = 1e-10
    sample_rate: int = DEFAULT_SR
    cqt_fmin: float = 32.70319566257483  # C1
    cqt_bins_per_octave: int = 12

    def __post_init__(self):
        if not self.frame_width_seconds > self.hop_seconds > 0:
            raise ValueError("need frame_width_seconds > hop_seconds > 0")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.cqt_hop_samples < 1:
            raise ValueError("cqt_hop_samples must be >= 1")

    @property
    def n_fft(self) -> int:
        return int(round(self.frame_width_seconds * self.sample_rate))

    @property
    def hop_samples(self) -> float:
        return self.hop_seconds * self.sample_rate

    def hop_seconds_for(self, kind: RepKind) -> float:
        if RepKind.parse(kind) == RepKind.CQT:
            return self.cqt_hop_samples / self.sample_rate
        return self.hop_seconds

    def frames_for(self, kind: RepKind, n_samples: int) -> int:
        if RepKind.parse(kind) == RepKind.CQT:
            return n_frames_for(n_samples, self.cqt_hop_samples)
        return n_frames_for(n_samples, self.hop_samples)


def n_frames_for(n_samples: int, hop_samples: float) -> int:
    # tolerance absorbs float error in hop_seconds * sample_rate
    return max(1, math.ceil(n_samples / hop_samples - 1e-9))


def silence_column(kind: RepKind, n_bins: int, log_floor: float) -> np.ndarray:
    kind = RepKind.parse(kind)
    if kind == RepKind.SPEC:
        return np.zeros(n_bins)
    if kind == RepKind.MFCC:
        col = np.zeros(n_bins)
        col[0] = math.log(log_floor) * math.sqrt(n_bins)
        return col
    return np.full(n_bins, math.log(log_floor))


def _check_clip(clip: AudioClip, cfg: FrameConfig) -> np.ndarray:
    if clip.sample_rate != cfg.sample_rate:
        clip = resample_clip(clip, cfg.sample_rate)
    if clip.samples.size < cfg.n_fft:
        raise ClipTooShort(
            f"clip {clip.clip_id!r} has {clip.samples.size} samples, frame needs {cfg.n_fft}"
        )
    return clip.samples


def _centred_frames(x: np.ndarray, frame_len: int, hop: float) -> np.ndarray:
    n = n_frames_for(x.size, hop)
    half = frame_len // 2
    padded = np.pad(x, (half, frame_len + 1))
    starts = np.rint(np.arange(n) * hop).astype(np.int64)
    return padded[starts[:, None] + np.arange(frame_len)[None, :]]


@lru_cache(maxsize=8)
def _hann(n: int) -> np.ndarray:
    return get_window("hann", n, fftbins=True)


def stft_power(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Full-resolution power spectrogram, shape [n_fft // 2 + 1, n_frames]."""
    frames = _centred_frames(x, cfg.n_fft, cfg.hop_samples) * _hann(cfg.n_fft)
    spec = np.fft.rfft(frames, axis=1)
    return (spec.real**2 + spec.imag**2).T


def pool_groups(n_freq: int, n_bins: int) -> np.ndarray:
    """Start index of each of ``n_bins`` contiguous near-equal groups (sizes differ by <= 1)."""
    return np.floor(np.arange(n_bins) * n_freq / n_bins + 1e-9).astype(np.int64)


def pooled_band_edges(cfg: FrameConfig) -> np.ndarray:
    """Frequency (Hz) range [lo, hi] of each pooled SPEC bin, shape [n_bins, 2]."""
    n_freq = cfg.n_fft // 2 + 1
    starts = pool_groups(n_freq, cfg.n_bins)
    stops = np.append(starts[1:], n_freq) - 1
    df = cfg.sample_rate / cfg.n_fft
    return np.stack([starts * df, stops * df], axis=1)


def power_spectrogram(clip: AudioClip, cfg: FrameConfig = FrameConfig()) -> TimeFreqRep:
    x = _check_clip(clip, cfg)
    power = stft_power(x, cfg)
    starts = pool_groups(power.shape[0], cfg.n_bins)
    sizes = np.diff(np.append(starts, power.shape[0]))
    pooled = np.add.reduceat(power, starts, axis=0) / sizes[:, None]
    return TimeFreqRep(pooled, RepKind.SPEC, cfg.hop_seconds, clip.clip_id, cfg.log_floor)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(cfg: FrameConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_bins + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FrameConfig) -> np.ndarray:
    """HTK triangular filters (unit peak), shape [n_bins, n_fft // 2 + 1]."""
    n_freq = cfg.n_fft // 2 + 1
    freqs = np.arange(n_freq) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2), cfg.n_bins + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def logmel(clip: AudioClip, cfg: FrameConfig = FrameConfig()) -> TimeFreqRep:
    x = _check_clip(clip, cfg)
    mel = mel_filterbank(cfg) @ stft_power(x, cfg)
    values = np.log(np.maximum(mel, cfg.log_floor))
    return TimeFreqRep(values, RepKind.LOGMEL, cfg.hop_seconds, clip.clip_id, cfg.log_floor)


def mfcc(clip: AudioClip, cfg: FrameConfig = FrameConfig()) -> TimeFreqRep:
    lm = logmel(clip, cfg)
    values = dct(lm.values, type=2, norm="ortho", axis=0)
    return TimeFreqRep(values, RepKind.MFCC, cfg.hop_seconds, clip.clip_id, cfg.log_floor)


def mfcc_to_logmel(values: np.ndarray) -> np.ndarray:
    return idct(values, type=2, norm="ortho", axis=0)


def cqt_frequencies(cfg: FrameConfig) -> np.ndarray:
    return cfg.cqt_fmin * 2.0 ** (np.arange(cfg.n_bins) / cfg.cqt_bins_per_octave)


def _cqt_decimation(cfg: FrameConfig) -> int:
    # largest power-of-two factor dividing the hop that keeps the top
    # kernel's band (plus resampler transition) under the new Nyquist
    q = 1.0 / (2.0 ** (1.0 / cfg.cqt_bins_per_octave) - 1.0)
    f_top = cqt_frequencies(cfg)[-1] * (1.0 + 2.0 / q)
    d = 1
    while (
        cfg.cqt_hop_samples % (2 * d) == 0
        and cfg.sample_rate / (2 * d) / 2 > 1.25 * f_top
    ):
        d *= 2
    return d


@lru_cache(maxsize=8)
def cqt_kernels(cfg: FrameConfig) -> tuple[np.ndarray, int]:
    """Time-domain CQT kernels at the decimated rate, centred in a common window.

    Returns ``(kernels [n_bins, width], decimation)``.  Bin ``k`` uses a Hann
    window of ``ceil(Q * sr / f_k)`` samples, so every bin has the same
    centre-frequency-to-bandwidth ratio ``Q = 1 / (2**(1/b) - 1)``.
    """
    d = _cqt_decimation(cfg)
    sr = cfg.sample_rate / d
    q = 1.0 / (2.0 ** (1.0 / cfg.cqt_bins_per_octave) - 1.0)
    freqs = cqt_frequencies(cfg)
    if freqs[-1] >= sr / 2:
        raise CrossFilterError("CQT top bin above Nyquist", code="CONFIG")
    lengths = np.ceil(q * sr / freqs).astype(np.int64)
    width = int(lengths.max()) | 1
    kernels = np.zeros((cfg.n_bins, width), dtype=np.complex128)
    for k, (f, n) in enumerate(zip(freqs, lengths)):
        t = np.arange(n) - (n - 1) / 2.0
        start = (width - n) // 2
        kernels[k, start : start + n] = _hann(int(n)) * np.exp(2j * np.pi * f * t / sr) / n
    return kernels, d


def cqt(clip: AudioClip, cfg: FrameConfig = FrameConfig()) -> TimeFreqRep:
    x = _check_clip(clip, cfg)
    kernels, d = cqt_kernels(cfg)
    xd = resample_poly(x, 1, d) if d > 1 else x
    frames = _centred_frames(xd, kernels.shape[1], cfg.cqt_hop_samples / d)
    # keep frame count tied to the original-rate sample count
    frames = frames[: n_frames_for(x.size, cfg.cqt_hop_samples)]
    response = np.abs(frames @ kernels.conj().T).T
    values = np.log(np.maximum(response, cfg.log_floor))
    return TimeFreqRep(
        values, RepKind.CQT, cfg.cqt_hop_samples / cfg.sample_rate, clip.clip_id, cfg.log_floor
    )


_EXTRACTORS = {
    RepKind.SPEC: power_spectrogram,
    RepKind.LOGMEL: logmel,
    RepKind.MFCC: mfcc,
    RepKind.CQT: cqt,
}


def represent(clip: AudioClip, kind: RepKind | str, cfg: FrameConfig = FrameConfig()) -> TimeFreqRep:
    return _EXTRACTORS[RepKind.parse(kind)](clip, cfg)


def resample_clip(clip: AudioClip, target_sr: int = DEFAULT_SR) -> AudioClip:
    """Polyphase resampling (rational factor from the rate gcd)."""
    if clip.sample_rate == target_sr:
        return clip
    g = math.gcd(int(clip.sample_rate), int(target_sr))
    y = resample_poly(clip.samples, target_sr // g, clip.sample_rate // g)
    return AudioClip(y, target_sr, clip.clip_id)


def crop_or_pad(rep: TimeFreqRep, target_frames: int, rng: np.random.Generator) -> TimeFreqRep:
    """Random window of ``target_frames`` frames, or symmetric silence padding.

    When the deficit is odd the extra frame goes at the end.
    """
    if target_frames < 1:
        raise ValueError("target_frames must be >= 1")
    n = rep.n_frames
    if n == target_frames:
        return rep
    if n > target_frames:
        start = int(rng.integers(0, n - target_frames + 1))
        return rep.replace(rep.values[:, start : start + target_frames])
    deficit = target_frames - n
    left = deficit // 2
    out = np.empty((rep.n_bins, target_frames), dtype=rep.values.dtype)
    out[:] = rep.silence()[:, None]
    out[:, left : left + n] = rep.values
    return rep.replace(out)


# Feature cache layout (little-endian):
#   magic   4s  b"CFTR"
#   version u16 (1)
#   kind    u8  RepKind value
#   pad     u8
#   n_bins  u32
#   n_frames u32
#   hop_seconds f64
#   log_floor   f64
# followed by n_bins * n_frames float32 values, row-major (bin-major).
_CACHE_MAGIC = b"CFTR"
_CACHE_HEADER = struct.Struct("<4sHBBIIdd")
CACHE_VERSION = 1


def write_rep(path: str | Path, rep: TimeFreqRep) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _CACHE_HEADER.pack(
        _CACHE_MAGIC, CACHE_VERSION, int(rep.kind), 0, rep.n_bins, rep.n_frames,
        rep.hop_seconds, rep.log_floor,
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(rep.values, dtype="<f4").tobytes())
    tmp.replace(path)


def read_rep_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_CACHE_HEADER.size)
    if len(raw) < _CACHE_HEADER.size:
        raise CrossFilterError(f"{path}: truncated feature file", code="CACHE")
    magic, version, kind, _, n_bins, n_frames, hop, floor = _CACHE_HEADER.unpack(raw)
    if magic != _CACHE_MAGIC or version != CACHE_VERSION:
        raise CrossFilterError(f"{path}: not a feature cache file", code="CACHE")
    return dict(kind=RepKind(kind), n_bins=n_bins, n_frames=n_frames, hop_seconds=hop, log_floor=floor)


def read_rep(path: str | Path, clip_id: str = "") -> TimeFreqRep:
    head = read_rep_header(path)
    data = np.fromfile(path, dtype="<f4", offset=_CACHE_HEADER.size)
    if data.size != head["n_bins"] * head["n_frames"]:
        raise CrossFilterError(f"{path}: payload size mismatch", code="CACHE")
    values = data.reshape(head["n_bins"], head["n_frames"]).astype(np.float64)
    return TimeFreqRep(values, head["kind"], head["hop_seconds"], clip_id, head["log_floor"])
