"""Cross-wise noise filtering of the noisy subset between two peer models.

Each epoch the partitions are rebuilt from the original ``(C, N)``: the noisy
items are visited in a fresh random order, and an item whose given label
agrees with model 1's prediction is promoted into ``C^2`` (and vice versa),
subject to a per-class cap ``k`` on the receiving partition.  A model's
choices therefore only ever reshape its peer's training data.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import BiQualityDataset, Item
from .errors import PredCoverage


def agree(label, p) -> bool:
    """True iff the most confident class of ``p`` is a positive class of ``label``.

    ``label`` is a class index or a binary label vector.  Ties in ``p`` go to
    the lowest class index.
    """
    c = int(np.argmax(np.asarray(p)))
    if np.isscalar(label):
        return c == int(label)
    return bool(np.asarray(label)[c] > 0)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def step_schedule(epoch: int, total_epochs: int, n_noisy: int, n_classes: int,
                  ramp_fraction: float = 0.5) -> int:
    """Per-class cap after ``epoch``: linear ramp from 0 to ``ceil(n_noisy / n_classes)``."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    k_max = math.ceil(n_noisy / n_classes)
    ramp = ramp_fraction * total_epochs
    frac = 1.0 if ramp <= 0 else min(1.0, epoch / ramp)
    return _round_half_up(k_max * frac)


@dataclass
class PartitionState:
    """Pseudo-curated selections for partitions 1 and 2 (index 0 and 1)."""

    n_classes: int
    pseudo_ids: tuple[list[str], list[str]] = field(default_factory=lambda: ([], []))
    delta: np.ndarray = None  # [2, J] per-class pseudo-curated counts
    k: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.delta is None:
            self.delta = np.zeros((2, self.n_classes), dtype=np.int64)

    def pseudo(self, r: int) -> list[str]:
        return self.pseudo_ids[r - 1]

    def partition(self, r: int, dataset: BiQualityDataset) -> tuple[list[Item], list[Item]]:
        """``(C^r, N^r)`` as item lists; promoted items keep their given labels."""
        chosen = set(self.pseudo(r))
        promoted = [it for it in dataset.noisy if it.clip_id in chosen]
        rest = [it for it in dataset.noisy if it.clip_id not in chosen]
        return list(dataset.curated) + promoted, rest

    def violations(self, dataset: BiQualityDataset) -> list[str]:
        """Broken partition invariants (empty when all hold)."""
        out = []
        everything = {it.clip_id for it in dataset.curated} | {it.clip_id for it in dataset.noisy}
        base = {it.clip_id for it in dataset.curated}
        bound = min(len(dataset.noisy), dataset.J * self.k)
        for r in (1, 2):
            cur, noisy = self.partition(r, dataset)
            c_ids, n_ids = {it.clip_id for it in cur}, {it.clip_id for it in noisy}
            if c_ids | n_ids != everything:
                out.append(f"r={r}: union differs from C ∪ N")
            if c_ids & n_ids:
                out.append(f"r={r}: C^r and N^r overlap")
            if not base <= c_ids:
                out.append(f"r={r}: curated item missing from C^r")
            if self.delta[r - 1].max(initial=0) > self.k:
                out.append(f"r={r}: class cap exceeded")
            if int(self.delta[r - 1].sum()) != len(self.pseudo(r)):
                out.append(f"r={r}: counters out of sync")
            if len(self.pseudo(r)) > bound:
                out.append(f"r={r}: more than min(|N|, J*k) selections")
            if len(set(self.pseudo(r))) != len(self.pseudo(r)):
                out.append(f"r={r}: duplicate selection")
        return out

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "pseudo_ids": [list(self.pseudo_ids[0]), list(self.pseudo_ids[1])],
            "delta": self.delta.tolist(),
            "k": self.k,
            "epoch": self.epoch,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PartitionState":
        return cls(d["n_classes"], (list(d["pseudo_ids"][0]), list(d["pseudo_ids"][1])),
                   np.asarray(d["delta"], dtype=np.int64), d["k"], d["epoch"])


def _aligned(preds, noisy: Sequence[Item], J: int, who: str) -> np.ndarray:
    if isinstance(preds, Mapping):
        missing = [it.clip_id for it in noisy if it.clip_id not in preds]
        if missing:
            raise PredCoverage(f"{who} has no prediction for {missing[:3]}")
        return np.stack([np.asarray(preds[it.clip_id], dtype=np.float64) for it in noisy]) if noisy else np.zeros((0, J))
    arr = np.asarray(preds, dtype=np.float64)
    if arr.shape[0] != len(noisy):
        raise PredCoverage(f"{who} covers {arr.shape[0]} of {len(noisy)} noisy items")
    return arr


def filter_epoch(pred1, pred2, dataset: BiQualityDataset, k: int,
                 rng: np.random.Generator, epoch: int = 0) -> PartitionState:
    """One selection pass; returns the partitions for the next epoch.

    ``pred1``/``pred2`` are model 1/2 probabilities for every noisy item, as a
    mapping clip_id -> vector or an array aligned with ``dataset.noisy``.
    Acceptance is first-come in the shuffled order until a class's counter
    in the receiving partition reaches ``k``.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    noisy = dataset.noisy
    p1 = _aligned(pred1, noisy, dataset.J, "model 1")
    p2 = _aligned(pred2, noisy, dataset.J, "model 2")
    state = PartitionState(dataset.J, k=k, epoch=epoch)
    order = rng.permutation(len(noisy))
    if k == 0:
        return state
    to_c2, to_c1 = state.pseudo_ids[1], state.pseudo_ids[0]
    for idx in order:
        it = noisy[idx]
        c1 = int(np.argmax(p1[idx]))
        if c1 in it.labels and state.delta[1, c1] < k:
            to_c2.append(it.clip_id)
            state.delta[1, c1] += 1
        c2 = int(np.argmax(p2[idx]))
        if c2 in it.labels and state.delta[0, c2] < k:
            to_c1.append(it.clip_id)
            state.delta[0, c2] += 1
    return state


@dataclass(frozen=True)
class FilterConfig:
    enabled: bool = True
    ramp_fraction: float = 0.5
    agree_head: str = "c"  # which head's probabilities drive agreement: "c" or "n"


TrainFn = Callable[[int, list[Item], list[Item], int], dict]
PredictFn = Callable[[int, list[Item]], np.ndarray]


def selection_audit(state: PartitionState, dataset: BiQualityDataset) -> dict:
    """Precision of each partition's pseudo-curated set, and recall of clean noisy items.

    Needs ground truth on the noisy items; returns {} otherwise.
    """
    if any(it.true_labels is None for it in dataset.noisy):
        return {}
    clean = {it.clip_id for it in dataset.noisy if it.is_clean()}
    out = {}
    for r in (1, 2):
        chosen = set(state.pseudo(r))
        hits = len(chosen & clean)
        out[f"precision_{r}"] = hits / len(chosen) if chosen else 1.0
        out[f"recall_{r}"] = hits / len(clean) if clean else 1.0
    return out


def run_noise_filtering(dataset: BiQualityDataset, total_epochs: int, train_fn: TrainFn,
                        predict_fn: PredictFn, rng: np.random.Generator,
                        cfg: FilterConfig = FilterConfig(), state: PartitionState | None = None,
                        start_epoch: int = 1, on_epoch: Callable[[dict, PartitionState], None] | None = None,
                        history: list[dict] | None = None, end_epoch: int | None = None
                        ) -> tuple[PartitionState, list[dict]]:
    """The epoch loop coordinating two peers.

    ``train_fn(r, C^r, N^r, epoch)`` trains model r for one epoch and returns its
    losses; ``predict_fn(r, items)`` returns model r's probabilities for
    ``items``.  ``state``/``start_epoch`` resume an interrupted run.  Each
    history row records the cap ``k`` used for this epoch's selection and the
    resulting pseudo-curated counts (which shape the next epoch's training).
    """
    state = state or PartitionState(dataset.J)
    history = history if history is not None else []
    last = total_epochs if end_epoch is None else end_epoch
    for j in range(start_epoch, last + 1):
        row = {"epoch": j}
        for r in (1, 2):
            cur, noisy = state.partition(r, dataset)
            for key, val in train_fn(r, cur, noisy, j).items():
                row[f"{key}_{r}"] = val
        k = state.k
        if cfg.enabled and dataset.noisy:
            if k > 0:
                preds = [predict_fn(r, dataset.noisy) for r in (1, 2)]
            else:  # nothing can be selected; skip inference but keep the shuffle
                preds = [np.zeros((len(dataset.noisy), dataset.J))] * 2
            state = filter_epoch(preds[0], preds[1], dataset, k, rng, epoch=j)
        else:
            state = PartitionState(dataset.J, k=k, epoch=j)
        row["k"] = k
        row["pseudo_count_1"] = len(state.pseudo(1))
        row["pseudo_count_2"] = len(state.pseudo(2))
        bad = state.violations(dataset)
        row["violations"] = len(bad)
        row.update(selection_audit(state, dataset))
        state.k = step_schedule(j, total_epochs, len(dataset.noisy), dataset.J, cfg.ramp_fraction)
        history.append(row)
        if on_epoch is not None:
            on_epoch(row, state)
    return state, history


@dataclass
class CrossFilterResult:
    trainers: list  # [Trainer for M^1, Trainer for M^2]
    state: PartitionState
    history: list[dict]


def train_crossfilter(dataset: BiQualityDataset, store1, store2, cfg1, cfg2,
                      filter_cfg: FilterConfig = FilterConfig(), seed: int = 0,
                      checkpoint_path: str | Path | None = None, history_path: str | Path | None = None,
                      resume: bool = False, stop_after: int | None = None,
                      eval_fn: Callable[[list], dict] | None = None, eval_every: int = 0) -> CrossFilterResult:
    """Train two peers (``cfg1``/``cfg2`` name their representations) with noise filtering.

    With ``filter_cfg.enabled = False`` this is plain multi-task training on
    the original partition.  A checkpoint holding both trainers, the filter
    random state, the partitions and the history is rewritten after every
    epoch; ``resume=True`` continues from it.  ``stop_after`` ends the run
    early (used to exercise resumption).
    """
    from .model import Trainer, load_checkpoint, save_checkpoint

    if cfg1.epochs != cfg2.epochs:
        raise ValueError("both peers must train for the same number of epochs")
    n_train = len(dataset.curated) + len(dataset.noisy)
    trainers = [
        Trainer(cfg, dataset.J, store, math.ceil(n_train / cfg.batch_size), dataset.multilabel)
        for cfg, store in ((cfg1, store1), (cfg2, store2))
    ]
    rng = np.random.default_rng([seed, 7])
    state, history, start = None, [], 1
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        ckpt = load_checkpoint(checkpoint_path)
        for t, st in zip(trainers, ckpt["trainers"]):
            t.load_state_dict(st)
        rng.bit_generator.state = ckpt["filter_rng"]
        state = PartitionState.from_dict(ckpt["partition"])
        history = list(ckpt["history"])
        start = ckpt["epoch"] + 1
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        with open(history_path, "w") as fh:  # rewrite rows already covered by the checkpoint
            for row in history:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def train_fn(r, cur, noisy, epoch):
        return trainers[r - 1].train_epoch(cur, noisy)

    def predict_fn(r, items):
        return trainers[r - 1].predict_items(items, head=filter_cfg.agree_head)

    def on_epoch(row, st):
        if eval_fn is not None and eval_every and (row["epoch"] % eval_every == 0 or row["epoch"] == cfg1.epochs):
            row.update(eval_fn(trainers))
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, {
                "trainers": [t.state_dict() for t in trainers],
                "configs": [cfg1.to_dict(), cfg2.to_dict()],
                "filter": asdict(filter_cfg),
                "filter_rng": rng.bit_generator.state,
                "partition": st.to_dict(),
                "history": history,
                "epoch": row["epoch"],
                "classes": dataset.classes,
            })

    end = cfg1.epochs if stop_after is None else min(stop_after, cfg1.epochs)
    if start <= end:
        state, history = run_noise_filtering(dataset, cfg1.epochs, train_fn, predict_fn, rng, filter_cfg,
                                             state, start, on_epoch, history, end_epoch=end)
    return CrossFilterResult(trainers, state or PartitionState(dataset.J), history)
