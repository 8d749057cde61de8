"""Dual-head classifier, augmentation, training loop and the inference protocol."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import Item, label_vector
from .dsp import (AudioClip, FrameConfig, RepKind, TimeFreqRep, crop_or_pad, represent,
                  silence_column)
from .errors import EmptyTrainSet, RepMismatch
from .losses import LossConfig, per_sample_loss

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class SpecAugConfig:
    freq_masks: int = 1
    time_masks: int = 1
    max_freq_fraction: float = 0.10
    max_time_fraction: float = 0.20


@dataclass
class TrainConfig:
    epochs: int = 300
    lr_min_warm: float = 5e-5
    lr_peak: float = 5e-4
    lr_final: float = 5e-6
    weight_decay: float = 5e-6
    warmup_fraction: float = 0.10
    mixup_alpha: float = 1.0  # 0 disables mixup
    specaug: SpecAugConfig | None = field(default_factory=SpecAugConfig)
    segment_seconds: float = 4.0
    batch_size: int = 32
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    repr_kind: str = "LOGMEL"
    widths: tuple[int, ...] = (16, 32, 64, 128)
    front_pool: tuple[int, int] = (2, 16)

    def __post_init__(self):
        if isinstance(self.loss, Mapping):
            self.loss = LossConfig(**self.loss)
        if isinstance(self.specaug, Mapping):
            self.specaug = SpecAugConfig(**self.specaug)
        self.widths = tuple(self.widths)
        self.front_pool = tuple(self.front_pool)
        self.repr_kind = RepKind.parse(self.repr_kind).name
        if not (self.lr_min_warm < self.lr_peak and self.lr_final < self.lr_peak):
            raise ValueError("learning rates must peak at lr_peak")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields {sorted(unknown)}")
        return cls(**dict(d))


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak``, then cosine annealing to ``lr_final``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = cfg.warmup_fraction * total_steps
    if step < warm:
        return cfg.lr_min_warm + (cfg.lr_peak - cfg.lr_min_warm) * step / warm
    rest = total_steps - warm
    t = 1.0 if rest <= 0 else (step - warm) / rest
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1.0 + math.cos(math.pi * t))


class SmallCNN(nn.Module):
    """Conv-BN-ReLU-maxpool blocks after an average-pooling front end.

    Maps ``[B, 1, bins, frames]`` to a feature map ``[B, C, bins', frames']``.
    Any module with that contract (and an ``out_channels`` attribute) can
    replace it as the backbone.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64, 128), front_pool=(2, 16)):
        super().__init__()
        layers: list[nn.Module] = [nn.AvgPool2d(front_pool, ceil_mode=True), nn.BatchNorm2d(1)]
        c_in = 1
        for i, c in enumerate(widths):
            layers += [nn.Conv2d(c_in, c, 3, padding=1, bias=False), nn.BatchNorm2d(c), nn.ReLU(inplace=True)]
            if i < len(widths) - 1:
                layers.append(nn.MaxPool2d(2, ceil_mode=True))
            c_in = c
        self.net = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, x):
        return self.net(x)


def pool_features(fmap: torch.Tensor) -> torch.Tensor:
    """Global max over frequency, then global mean over time: [B, C, F, T] -> [B, C]."""
    return fmap.amax(dim=2).mean(dim=2)


class DualHeadModel(nn.Module):
    def __init__(self, n_classes: int, repr_kind: RepKind | str = RepKind.LOGMEL,
                 backbone: nn.Module | None = None, multilabel: bool = False,
                 widths=(16, 32, 64, 128), front_pool=(2, 16)):
        super().__init__()
        self.backbone = backbone if backbone is not None else SmallCNN(widths, front_pool)
        self.head_c = nn.Linear(self.backbone.out_channels, n_classes)
        self.head_n = nn.Linear(self.backbone.out_channels, n_classes)
        self.repr_kind = RepKind.parse(repr_kind)
        self.multilabel = multilabel
        self.n_classes = n_classes

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return pool_features(self.backbone(x))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.features(x)
        return self.head_c(h), self.head_n(h)

    def probs(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        zc, zn = self(x)
        pc = torch.sigmoid(zc) if self.multilabel else torch.softmax(zc, dim=1)
        return pc, torch.softmax(zn, dim=1)


def _as_input(values: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr[:, None]))


def forward(model: DualHeadModel, rep: TimeFreqRep) -> tuple[np.ndarray, np.ndarray]:
    """Head probabilities ``(p_c, p_n)`` for one representation (eval mode)."""
    if RepKind.parse(rep.kind) != model.repr_kind:
        raise RepMismatch(f"model consumes {model.repr_kind.name}, got {RepKind.parse(rep.kind).name}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        pc, pn = model.probs(_as_input(rep.values))
    model.train(was_training)
    return pc[0].double().numpy(), pn[0].double().numpy()


def mixup(xs: np.ndarray, ys: np.ndarray, rng: np.random.Generator, alpha: float = 1.0,
          gammas: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convex-combine each item with a random in-batch partner.

    Returns ``(mixed_x, mixed_y, gammas)``; ``gammas[i]`` weights item ``i``.
    """
    n = len(xs)
    if n == 0:
        raise ValueError("mixup needs a nonempty batch")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    partner = rng.permutation(n)
    if gammas is None:
        gammas = rng.beta(alpha, alpha, size=n)
    g = np.asarray(gammas, dtype=np.float64)
    xs, ys = np.asarray(xs), np.asarray(ys)
    gx = g.astype(xs.dtype if xs.dtype.kind == "f" else np.float64).reshape((n,) + (1,) * (xs.ndim - 1))
    gy = g.reshape((n,) + (1,) * (ys.ndim - 1))
    return gx * xs + (1 - gx) * xs[partner], gy * ys + (1 - gy) * ys[partner], g


def spec_augment(rep: TimeFreqRep | np.ndarray, rng: np.random.Generator,
                 cfg: SpecAugConfig = SpecAugConfig(), silence: np.ndarray | None = None):
    """Set one random frequency band and one random time band to silence.

    Band widths are drawn uniformly from ``0..floor(fraction * size)``.
    """
    if isinstance(rep, TimeFreqRep):
        return rep.replace(spec_augment(rep.values, rng, cfg, rep.silence()))
    values = np.array(rep, copy=True)
    n_bins, n_frames = values.shape
    fill = np.zeros(n_bins) if silence is None else np.asarray(silence)
    for _ in range(cfg.freq_masks):
        w = int(rng.integers(0, int(math.floor(cfg.max_freq_fraction * n_bins)) + 1))
        f0 = int(rng.integers(0, n_bins - w + 1))
        values[f0 : f0 + w, :] = fill[f0 : f0 + w, None]
    for _ in range(cfg.time_masks):
        w = int(rng.integers(0, int(math.floor(cfg.max_time_fraction * n_frames)) + 1))
        t0 = int(rng.integers(0, n_frames - w + 1))
        values[:, t0 : t0 + w] = fill[:, None]
    return values


def ensemble(p1, p2) -> np.ndarray:
    """Sum of the peers' probabilities (a ranking score, not renormalised)."""
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    if p1.shape != p2.shape:
        raise ValueError(f"length mismatch {p1.shape} vs {p2.shape}")
    return p1 + p2


def segment_frames(kind: RepKind | str, seconds: float, frame_cfg: FrameConfig) -> int:
    return frame_cfg.frames_for(kind, int(round(seconds * frame_cfg.sample_rate)))


class FeatureStore:
    """In-memory representations of one kind, keyed by clip id."""

    def __init__(self, kind: RepKind | str, reps: Mapping[str, TimeFreqRep], frame_cfg: FrameConfig = FrameConfig()):
        self.kind = RepKind.parse(kind)
        self.frame_cfg = frame_cfg
        self.reps = dict(reps)
        self.silence = silence_column(self.kind, frame_cfg.n_bins, frame_cfg.log_floor)

    def __getitem__(self, clip_id: str) -> TimeFreqRep:
        return self.reps[clip_id]

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self.reps

    def __len__(self):
        return len(self.reps)


class Trainer:
    """Owns one model, its optimizer and its data random stream."""

    def __init__(self, cfg: TrainConfig, n_classes: int, store: FeatureStore, steps_per_epoch: int,
                 multilabel: bool = False, backbone: nn.Module | None = None):
        self.cfg = cfg
        self.store = store
        self.kind = RepKind.parse(cfg.repr_kind)
        if store.kind != self.kind:
            raise RepMismatch(f"store holds {store.kind.name}, config wants {self.kind.name}")
        torch.manual_seed(cfg.seed)
        self.model = DualHeadModel(n_classes, self.kind, backbone, multilabel, cfg.widths, cfg.front_pool)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr_min_warm,
                                           weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.total_steps = cfg.epochs * self.steps_per_epoch
        self.step = 0
        self.epoch = 0
        self.n_classes = n_classes
        self.seg_frames = segment_frames(self.kind, cfg.segment_seconds, store.frame_cfg)

    @property
    def curated_loss(self) -> str:
        loss = self.cfg.loss.curated
        if self.model.multilabel and loss == "cce":
            return "bce"
        return loss

    def _segments(self, items: Sequence[Item], augment: bool) -> np.ndarray:
        out = np.empty((len(items), self.store.frame_cfg.n_bins, self.seg_frames), dtype=np.float32)
        for i, it in enumerate(items):
            seg = crop_or_pad(self.store[it.clip_id], self.seg_frames, self.rng).values
            if augment and self.cfg.specaug is not None:
                seg = spec_augment(seg, self.rng, self.cfg.specaug, self.store.silence)
            out[i] = seg
        return out

    def make_stream(self, items: Sequence[Item], augment: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Cropped, augmented and (optionally) mixed inputs and soft targets for one stream."""
        xs = self._segments(items, augment)
        ys = np.stack([label_vector(it.labels, self.n_classes) for it in items])
        if augment and self.cfg.mixup_alpha > 0 and len(items) > 1:
            xs, ys, _ = mixup(xs, ys, self.rng, self.cfg.mixup_alpha)
        return xs.astype(np.float32), ys

    def set_lr(self) -> float:
        lr = lr_schedule(min(self.step, self.total_steps), self.total_steps, self.cfg)
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        return lr

    def batch_loss(self, xc, yc, xn, yn) -> tuple[torch.Tensor, float, float]:
        """Bi-quality risk for one batch: mean curated loss + lambda * mean noisy loss."""
        lc_cfg = self.cfg.loss
        parts = [a for a in (xc, xn) if a is not None and len(a)]
        zc, zn = self.model(_as_input(np.concatenate(parts)))
        nc = 0 if xc is None else len(xc)
        risk = zc.sum() * 0.0
        loss_c = loss_n = float("nan")
        if nc:
            lc = per_sample_loss(self.curated_loss, zc[:nc], torch.as_tensor(yc, dtype=zc.dtype), lc_cfg.q, lc_cfg.clip_eps)
            risk = risk + lc.mean()
            loss_c = lc.mean().item()
        if xn is not None and len(xn):
            ln = per_sample_loss(lc_cfg.noisy, zn[nc:], torch.as_tensor(yn, dtype=zn.dtype), lc_cfg.q, lc_cfg.clip_eps)
            risk = risk + lc_cfg.lambda_ * ln.mean()
            loss_n = ln.mean().item()
        return risk, loss_c, loss_n

    def train_epoch(self, curated: Sequence[Item], noisy: Sequence[Item] = ()) -> dict:
        """One shuffled pass over ``curated ∪ noisy``; returns mean stream losses."""
        tagged = [(it, True) for it in curated] + [(it, False) for it in noisy]
        if not tagged:
            raise EmptyTrainSet("no training items")
        self.model.train()
        order = self.rng.permutation(len(tagged))
        sums = {"loss_c": [0.0, 0], "loss_n": [0.0, 0]}
        bs = self.cfg.batch_size
        for b in range(0, len(order), bs):
            batch = [tagged[i] for i in order[b : b + bs]]
            cur = [it for it, is_c in batch if is_c]
            noi = [it for it, is_c in batch if not is_c]
            xc, yc = self.make_stream(cur) if cur else (None, None)
            xn, yn = self.make_stream(noi) if noi else (None, None)
            self.set_lr()
            risk, lc, ln = self.batch_loss(xc, yc, xn, yn)
            self.optimizer.zero_grad(set_to_none=True)
            risk.backward()
            self.optimizer.step()
            self.step += 1
            if cur:
                sums["loss_c"][0] += lc * len(cur)
                sums["loss_c"][1] += len(cur)
            if noi:
                sums["loss_n"][0] += ln * len(noi)
                sums["loss_n"][1] += len(noi)
        self.epoch += 1
        return {k: (s / n if n else float("nan")) for k, (s, n) in sums.items()}

    def predict_items(self, items: Sequence[Item], head: str = "c", batch_size: int = 128) -> np.ndarray:
        """Probabilities on one deterministic centre-crop per item (used for filtering)."""
        self.model.eval()
        out = []
        with torch.no_grad():
            for b in range(0, len(items), batch_size):
                xs = np.stack([_centre_crop(self.store[it.clip_id], self.seg_frames).values
                               for it in items[b : b + batch_size]])
                pc, pn = self.model.probs(_as_input(xs))
                out.append((pc if head == "c" else pn).double().numpy())
        self.model.train()
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": self.rng.bit_generator.state,
            "step": self.step,
            "epoch": self.epoch,
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["rng"]
        self.step = state["step"]
        self.epoch = state["epoch"]


def _centre_crop(rep: TimeFreqRep, target: int) -> TimeFreqRep:
    if rep.n_frames > target:
        start = (rep.n_frames - target) // 2
        return rep.replace(rep.values[:, start : start + target])
    return crop_or_pad(rep, target, None)


def predict_rep(model: DualHeadModel, rep: TimeFreqRep, rng: np.random.Generator,
                n_segments: int = 5, seg_frames: int = 800) -> np.ndarray:
    """Average curated-head probability over ``n_segments`` random crops (no augmentation)."""
    if RepKind.parse(rep.kind) != model.repr_kind:
        raise RepMismatch(f"model consumes {model.repr_kind.name}, got {RepKind.parse(rep.kind).name}")
    segs = np.stack([crop_or_pad(rep, seg_frames, rng).values for _ in range(n_segments)])
    was_training = model.training
    model.eval()
    with torch.no_grad():
        pc, _ = model.probs(_as_input(segs))
    model.train(was_training)
    return pc.double().numpy().mean(axis=0)


def predict_clip(model: DualHeadModel, clip: AudioClip, rng: np.random.Generator,
                 frame_cfg: FrameConfig = FrameConfig(), segment_seconds: float = 4.0,
                 n_segments: int = 5) -> np.ndarray:
    rep = represent(clip, model.repr_kind, frame_cfg)
    return predict_rep(model, rep, rng, n_segments, segment_frames(model.repr_kind, segment_seconds, frame_cfg))


def predict_items(model: DualHeadModel, store: FeatureStore, items: Sequence[Item], seed: int = 0,
                  segment_seconds: float = 4.0, n_segments: int = 5) -> np.ndarray:
    """Inference protocol over a list of items; one seeded stream for the whole list."""
    rng = np.random.default_rng(seed)
    seg = segment_frames(model.repr_kind, segment_seconds, store.frame_cfg)
    if not items:
        return np.zeros((0, model.n_classes))
    return np.stack([predict_rep(model, store[it.clip_id], rng, n_segments, seg) for it in items])


def save_checkpoint(path: str | Path, payload: dict) -> None:
    """Write ``payload`` (trainer states, configs, loop state) under a versioned header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"format": "crossfilter-checkpoint", "version": CHECKPOINT_VERSION, **payload}, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != "crossfilter-checkpoint" or ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint")
    return ckpt
