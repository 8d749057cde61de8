"""Featurisation, method dispatch and evaluation shared by the CLI and scripts."""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baselines import (CoteachingConfig, default_loss_for, train_coteaching, train_pseudolabel,
                        train_single)
from .data import BiQualityDataset, Item
from .dsp import FrameConfig, RepKind, TimeFreqRep, read_rep, read_rep_header, represent, write_rep
from .errors import AudioReadError, ConfigError, CrossFilterError, EmptyTest
from .metrics import accuracy, lwlrap, map_at_3, per_class_report
from .model import (DualHeadModel, FeatureStore, TrainConfig, ensemble, load_checkpoint, predict_items,
                    save_checkpoint)
from .noise_filter import FilterConfig, train_crossfilter
from .synth import read_wav

log = logging.getLogger(__name__)

METHODS = ("crossfilter", "mtl", "coteaching", "pseudolabel", "lq", "cce")
CACHE_ENV = "CROSSFILTER_CACHE"


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one training run from its dataset."""

    manifest: str
    method: str = "crossfilter"
    reps: tuple[str, str] = ("LOGMEL", "CQT")
    train: TrainConfig = field(default_factory=TrainConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    coteaching: CoteachingConfig | None = None
    out_dir: str = "runs/default"
    cache: str = ""
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.filter, dict):
            self.filter = FilterConfig(**self.filter)
        if isinstance(self.coteaching, dict):
            self.coteaching = CoteachingConfig(**self.coteaching)
        self.reps = tuple(RepKind.parse(r).name for r in self.reps)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method: {self.method!r} not one of {', '.join(METHODS)}")
        if len(self.reps) != 2:
            raise ConfigError("reps: need exactly two representations")
        if not Path(self.manifest).is_file():
            raise ConfigError(f"manifest: {self.manifest} does not exist")
        if self.coteaching is not None and self.method != "coteaching":
            raise ConfigError("coteaching: epsilon/ramp only apply to method=coteaching")
        if self.train.epochs < 1:
            raise ConfigError("train.epochs: must be >= 1")

    def resolved(self) -> "ExperimentConfig":
        """Copy with method defaults filled in (what the run actually uses)."""
        co = self.coteaching
        if self.method == "coteaching" and co is None:
            co = CoteachingConfig()
        return replace(self, coteaching=co, manifest=str(Path(self.manifest).resolve()),
                       cache=str(Path(self.cache).resolve()) if self.cache else "")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reps"] = list(self.reps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    def write(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def derive_seed(root: int, *names: str) -> int:
    """Child seed for a named component; deterministic in ``root``."""
    key = [int(root)] + [zlib.crc32(n.encode()) for n in names]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def cache_dir(default: str | Path) -> Path:
    return Path(os.environ.get(CACHE_ENV) or default)


def cache_path(root: Path, kind: RepKind | str, clip_id: str) -> Path:
    return Path(root) / RepKind.parse(kind).name.lower() / f"{clip_id}.cftr"


def _as_store_rep(rep: TimeFreqRep) -> TimeFreqRep:
    return rep.replace(rep.values.astype(np.float32))


def featurize_clips(pairs: Iterable, kinds: Sequence[str], frame_cfg: FrameConfig = FrameConfig()
                    ) -> dict[RepKind, FeatureStore]:
    """In-memory features for ``(item, clip)`` pairs."""
    kinds = [RepKind.parse(k) for k in kinds]
    reps: dict[RepKind, dict[str, TimeFreqRep]] = {k: {} for k in kinds}
    for it, clip in pairs:
        for k in kinds:
            reps[k][it.clip_id] = _as_store_rep(represent(clip, k, frame_cfg))
    return {k: FeatureStore(k, reps[k], frame_cfg) for k in kinds}


def _up_to_date(path: Path, audio: Path, kind: RepKind, frame_cfg: FrameConfig) -> bool:
    if not path.exists():
        return False
    try:
        head = read_rep_header(path)
    except Exception:
        return False
    return (head["kind"] == kind and head["n_bins"] == frame_cfg.n_bins
            and abs(head["hop_seconds"] - frame_cfg.hop_seconds_for(kind)) < 1e-12
            and head["log_floor"] == frame_cfg.log_floor
            and path.stat().st_mtime_ns >= audio.stat().st_mtime_ns)


def featurize_dataset(dataset: BiQualityDataset, kinds: Sequence[str], root: str | Path,
                      frame_cfg: FrameConfig = FrameConfig()) -> dict[str, int]:
    """Fill the on-disk cache for every clip; returns ``{"computed": n, "skipped": m}``."""
    kinds = [RepKind.parse(k) for k in kinds]
    counts = {"computed": 0, "skipped": 0}
    for it in dataset.all_items():
        audio = Path(it.path)
        todo = [k for k in kinds if not _up_to_date(cache_path(root, k, it.clip_id), audio, k, frame_cfg)]
        counts["skipped"] += len(kinds) - len(todo)
        if not todo:
            continue
        clip = read_wav(audio, it.clip_id)
        for k in todo:
            try:
                rep = represent(clip, k, frame_cfg)
            except Exception as exc:
                raise AudioReadError(it.clip_id, str(exc)) from exc
            write_rep(cache_path(root, k, it.clip_id), rep)
            counts["computed"] += 1
    return counts


def load_stores(dataset: BiQualityDataset, kinds: Sequence[str], root: str | Path,
                frame_cfg: FrameConfig = FrameConfig(), items: Sequence[Item] | None = None
                ) -> dict[RepKind, FeatureStore]:
    out = {}
    items = list(dataset.all_items()) if items is None else list(items)
    for k in (RepKind.parse(k) for k in kinds):
        reps = {}
        for it in items:
            p = cache_path(root, k, it.clip_id)
            if not p.exists():
                raise FileNotFoundError(f"no cached {k.name} for {it.clip_id!r}; run featurize first")
            reps[it.clip_id] = _as_store_rep(read_rep(p, it.clip_id))
        out[k] = FeatureStore(k, reps, frame_cfg)
    return out


def peer_configs(base: TrainConfig, reps: Sequence[str], seed: int, method: str) -> list[TrainConfig]:
    loss = default_loss_for("crossfilter" if method == "mtl" else method, base.loss)
    return [replace(base, repr_kind=RepKind.parse(r).name, loss=loss, seed=derive_seed(seed, method, f"model{i}"))
            for i, r in enumerate(reps, 1)]


def run_method(method: str, dataset: BiQualityDataset, stores: dict, base: TrainConfig,
               reps: Sequence[str] = ("LOGMEL", "CQT"), seed: int = 0,
               out_dir: str | Path | None = None, filter_cfg: FilterConfig = FilterConfig(),
               co_cfg: CoteachingConfig = CoteachingConfig(), resume: bool = False,
               stop_after: int | None = None, eval_fn=None, eval_every: int = 0):
    """Train the two peer models of ``method``; returns an object with ``trainers`` and ``history``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    cfgs = peer_configs(base, reps, seed, method)
    peer_stores = [stores[RepKind.parse(r)] for r in reps]
    out = Path(out_dir) if out_dir is not None else None
    hist = out / "history.jsonl" if out else None
    if method in ("crossfilter", "mtl"):
        fcfg = filter_cfg if method == "crossfilter" else replace(filter_cfg, enabled=False)
        return train_crossfilter(dataset, peer_stores[0], peer_stores[1], cfgs[0], cfgs[1], fcfg,
                                 seed=derive_seed(seed, method, "filter"),
                                 checkpoint_path=out / "checkpoint.pt" if out else None,
                                 history_path=hist, resume=resume, stop_after=stop_after,
                                 eval_fn=eval_fn, eval_every=eval_every)
    if method == "coteaching":
        return train_coteaching(dataset, peer_stores, cfgs, co_cfg, seed=derive_seed(seed, method, "order"),
                                history_path=hist)
    if method == "pseudolabel":
        return train_pseudolabel(dataset, peer_stores, cfgs, history_path=hist)
    return train_single(dataset, peer_stores, cfgs, history_path=hist)


def score_rows(probs: dict[str, np.ndarray], y: np.ndarray, multilabel: bool) -> dict[str, dict[str, float]]:
    """Aggregate metrics per model column (``M1``, ``M2``, ``M1+M2``)."""
    rows = {}
    for name, p in probs.items():
        if multilabel:
            rows[name] = {"lwlrap": lwlrap(p, y)[0]}
        else:
            rows[name] = {"accuracy": accuracy(p, y), "map3": map_at_3(p, y), "lwlrap": lwlrap(p, y)[0]}
    return rows


def predict_peers(models, stores: Sequence[FeatureStore], items: Sequence[Item], seed: int = 0,
                  segment_seconds: float = 4.0) -> dict[str, np.ndarray]:
    if not items:
        raise EmptyTest("no test items")
    p1 = predict_items(models[0], stores[0], items, derive_seed(seed, "eval", "1"), segment_seconds)
    p2 = predict_items(models[1], stores[1], items, derive_seed(seed, "eval", "2"), segment_seconds)
    return {"M1": p1, "M2": p2, "M1+M2": np.stack([ensemble(a, b) for a, b in zip(p1, p2)])}


def evaluate(models, stores: Sequence[FeatureStore], dataset: BiQualityDataset, items: Sequence[Item] | None = None,
             seed: int = 0, segment_seconds: float = 4.0):
    """Inference protocol plus metrics; returns ``(rows, probs, reports)``."""
    items = list(dataset.test if items is None else items)
    probs = predict_peers(models, stores, items, seed, segment_seconds)
    y = dataset.label_matrix(items)
    rows = score_rows(probs, y, dataset.multilabel)
    metrics = ["lwlrap"] if dataset.multilabel else ["accuracy", "map3", "lwlrap"]
    reports = {(name, m): per_class_report(p, y, m, dataset.classes) for name, p in probs.items() for m in metrics}
    return rows, probs, reports


def save_models(path: str | Path, trainers, dataset: BiQualityDataset, method: str) -> None:
    """Final weights of both peers plus what is needed to rebuild them."""
    save_checkpoint(path, {
        "kind": "models",
        "method": method,
        "classes": list(dataset.classes),
        "multilabel": dataset.multilabel,
        "models": [t.model.state_dict() for t in trainers],
        "configs": [t.cfg.to_dict() for t in trainers],
    })


def load_models(path: str | Path, classes: Sequence[str] | None = None) -> list[DualHeadModel]:
    ckpt = load_checkpoint(path)
    if ckpt.get("kind") != "models":
        raise CrossFilterError(f"{path}: not a model bundle", code="CHECKPOINT")
    if classes is not None and len(classes) != len(ckpt["classes"]):
        raise CrossFilterError(
            f"models know {len(ckpt['classes'])} classes, manifest has {len(classes)}", code="CLASS_MISMATCH")
    models = []
    for state, cfg in zip(ckpt["models"], ckpt["configs"]):
        cfg = TrainConfig.from_dict(cfg)
        m = DualHeadModel(len(ckpt["classes"]), cfg.repr_kind, multilabel=ckpt["multilabel"],
                          widths=cfg.widths, front_pool=cfg.front_pool)
        m.load_state_dict(state)
        m.eval()
        models.append(m)
    return models
