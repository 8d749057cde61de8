"""Comparison methods sharing the CrossFilter data pipeline and backbone.

* ``cce`` / ``lq``: one network per representation, one head, one loss over C ∪ N.
* ``coteaching``: two peers exchanging small-loss samples.
* ``pseudolabel``: pre-train on C, relabel N by prediction, fine-tune on both.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import BiQualityDataset, Item
from .losses import LossConfig, per_sample_loss
from .model import FeatureStore, Trainer, TrainConfig, _as_input


@dataclass(frozen=True)
class CoteachingConfig:
    epsilon: float = 0.3
    ramp_epochs: int = 10

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon={self.epsilon} outside [0, 1)")

    def forget_rate(self, epoch: int) -> float:
        """Fraction of large-loss samples dropped during ``epoch`` (1-based)."""
        return self.epsilon * min(1.0, epoch / max(1, self.ramp_epochs))


def _smallest(losses: np.ndarray, n_keep: int) -> np.ndarray:
    order = np.argsort(losses, kind="stable")  # equal losses: lower index first
    return np.sort(order[:n_keep])


def coteaching_select(losses_a, losses_b, keep_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices each peer trains on, chosen from the *other* peer's losses.

    Returns ``(for_b, for_a)``: ``for_b`` are the ``ceil(keep_fraction * n)``
    smallest entries of ``losses_a``, and vice versa.
    """
    a, b = np.asarray(losses_a, dtype=np.float64), np.asarray(losses_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("loss lists differ in length")
    if a.size == 0:
        raise ValueError("empty batch")
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    n_keep = math.ceil(keep_fraction * a.size - 1e-12)
    return _smallest(a, n_keep), _smallest(b, n_keep)


def pseudo_label(model_or_probs, items: Sequence[Item]) -> list[Item]:
    """Replace each item's label with the arg-max class of the curated head.

    ``model_or_probs`` is a :class:`Trainer` or an ``[n_items, J]`` array.
    """
    if isinstance(model_or_probs, Trainer):
        probs = model_or_probs.predict_items(list(items), head="c")
    else:
        probs = np.asarray(model_or_probs)
    if len(probs) != len(items):
        raise ValueError("one prediction per item required")
    return [it.with_labels([int(np.argmax(p))]) for it, p in zip(items, probs)]


@dataclass
class MethodResult:
    trainers: list
    history: list[dict]


def _log(history_path, row):
    if history_path is not None:
        with open(history_path, "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _prep_history(history_path):
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        Path(history_path).write_text("")


def train_single(dataset: BiQualityDataset, stores: Sequence[FeatureStore], cfgs: Sequence[TrainConfig],
                 history_path=None) -> MethodResult:
    """Independent single-head networks (one per config) on C ∪ N with ``cfg.loss.curated``."""
    items = list(dataset.curated) + list(dataset.noisy)
    trainers = [Trainer(c, dataset.J, s, math.ceil(len(items) / c.batch_size), dataset.multilabel)
                for c, s in zip(cfgs, stores)]
    _prep_history(history_path)
    history = []
    for epoch in range(1, cfgs[0].epochs + 1):
        row = {"epoch": epoch}
        for r, t in enumerate(trainers, 1):
            row[f"loss_c_{r}"] = t.train_epoch(items, ())["loss_c"]
        history.append(row)
        _log(history_path, row)
    return MethodResult(trainers, history)


def single_lq_train(dataset: BiQualityDataset, store: FeatureStore, cfg: TrainConfig, q: float = 0.7) -> Trainer:
    """One network, one head, L_q over every training item."""
    cfg = replace(cfg, loss=replace(cfg.loss, curated="lq", q=q))
    return train_single(dataset, [store], [cfg]).trainers[0]


def train_coteaching(dataset: BiQualityDataset, stores: Sequence[FeatureStore], cfgs: Sequence[TrainConfig],
                     co_cfg: CoteachingConfig = CoteachingConfig(), seed: int = 0,
                     history_path=None) -> MethodResult:
    """Peers see identical batches; each updates on the small-loss half picked by the other.

    Mixup is disabled so a per-sample loss stays tied to one item.
    """
    items = list(dataset.curated) + list(dataset.noisy)
    cfgs = [replace(c, mixup_alpha=0.0) for c in cfgs]
    steps = math.ceil(len(items) / cfgs[0].batch_size)
    trainers = [Trainer(c, dataset.J, s, steps, dataset.multilabel) for c, s in zip(cfgs, stores)]
    order_rng = np.random.default_rng([seed, 11])
    _prep_history(history_path)
    history = []
    bs = cfgs[0].batch_size
    for epoch in range(1, cfgs[0].epochs + 1):
        keep = 1.0 - co_cfg.forget_rate(epoch)
        order = order_rng.permutation(len(items))
        sums = np.zeros(2)
        for b in range(0, len(order), bs):
            batch = [items[i] for i in order[b : b + bs]]
            logits, targets = [], []
            for t in trainers:
                t.model.train()
                xs, ys = t.make_stream(batch)
                zc, _ = t.model(_as_input(xs))
                logits.append(zc)
                targets.append(torch.as_tensor(ys, dtype=zc.dtype))
            losses = [per_sample_loss(t.curated_loss, z, y, t.cfg.loss.q, t.cfg.loss.clip_eps)
                      for t, z, y in zip(trainers, logits, targets)]
            for_b, for_a = coteaching_select(losses[0].detach().numpy(), losses[1].detach().numpy(), keep)
            for r, (t, idx) in enumerate(zip(trainers, (for_a, for_b))):
                loss = losses[r][torch.as_tensor(idx)].mean()
                t.set_lr()
                t.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                t.optimizer.step()
                t.step += 1
                sums[r] += loss.item() * len(batch)
        for t in trainers:
            t.epoch += 1
        row = {"epoch": epoch, "keep_fraction": keep,
               "loss_c_1": sums[0] / len(items), "loss_c_2": sums[1] / len(items)}
        history.append(row)
        _log(history_path, row)
    return MethodResult(trainers, history)


def train_pseudolabel(dataset: BiQualityDataset, stores: Sequence[FeatureStore], cfgs: Sequence[TrainConfig],
                      pretrain_fraction: float = 1 / 3, history_path=None) -> MethodResult:
    """Per representation: CCE on C, relabel N with the model, then CCE on C ∪ relabelled N.

    One learning-rate schedule spans both phases.
    """
    cfgs = [replace(c, loss=replace(c.loss, curated="cce")) for c in cfgs]
    n_pre = max(1, int(round(pretrain_fraction * cfgs[0].epochs)))
    _prep_history(history_path)
    trainers, history = [], [{"epoch": e} for e in range(1, cfgs[0].epochs + 1)]
    for r, (c, s) in enumerate(zip(cfgs, stores), 1):
        cur, noisy = list(dataset.curated), list(dataset.noisy)
        steps_pre = math.ceil(len(cur) / c.batch_size)
        steps_ft = math.ceil((len(cur) + len(noisy)) / c.batch_size)
        t = Trainer(c, dataset.J, s, steps_pre, dataset.multilabel)
        t.total_steps = n_pre * steps_pre + (c.epochs - n_pre) * steps_ft
        relabeled = noisy
        for epoch in range(1, c.epochs + 1):
            if epoch == n_pre + 1:
                relabeled = pseudo_label(t, noisy)
                agree = np.mean([a.labels == b.labels for a, b in zip(relabeled, noisy)]) if noisy else 1.0
                history[epoch - 1][f"relabel_agreement_{r}"] = float(agree)
            train_items = cur if epoch <= n_pre else cur + relabeled
            history[epoch - 1][f"loss_c_{r}"] = t.train_epoch(train_items, ())["loss_c"]
        trainers.append(t)
    for row in history:
        _log(history_path, row)
    return MethodResult(trainers, history)


def default_loss_for(method: str, loss: LossConfig) -> LossConfig:
    """Loss settings each method trains with."""
    if method == "lq":
        return replace(loss, curated="lq", q=0.7)
    if method in ("cce", "coteaching", "pseudolabel"):
        return replace(loss, curated="cce")
    return loss
