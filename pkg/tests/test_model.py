import math

import numpy as np
import pytest
import torch
from scipy import stats

from crossfilter.data import BiQualityDataset, Item
from crossfilter.dsp import AudioClip, FrameConfig, RepKind, TimeFreqRep, represent
from crossfilter.errors import EmptyTrainSet, RepMismatch
from crossfilter.losses import LossConfig
from crossfilter.model import (DualHeadModel, FeatureStore, SpecAugConfig, Trainer, TrainConfig, ensemble,
                               forward, load_checkpoint, lr_schedule, mixup, pool_features, predict_clip,
                               predict_rep, save_checkpoint, spec_augment)

SR = 44100


def tiny_store(n_items=12, J=3, frames=800, kind=RepKind.LOGMEL, seed=0):
    """Random but class-separable feature maps: class j lights up band j."""
    rng = np.random.default_rng(seed)
    reps, items = {}, []
    for i in range(n_items):
        j = i % J
        v = rng.normal(-5, 1, (64, frames))
        v[j * 10 : j * 10 + 8] += 6
        cid = f"x{i}"
        reps[cid] = TimeFreqRep(v.astype(np.float32), kind, 0.005)
        items.append(Item(cid, (j,)))
    return FeatureStore(kind, reps), items


def small_cfg(**kw):
    base = dict(epochs=4, batch_size=4, widths=(4, 8), seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule:
    def test_endpoints(self):
        cfg = TrainConfig()
        assert lr_schedule(0, 1000, cfg) == pytest.approx(5e-5)
        assert lr_schedule(100, 1000, cfg) == pytest.approx(5e-4)
        assert lr_schedule(1000, 1000, cfg) == pytest.approx(5e-6)
        assert lr_schedule(550, 1000, cfg) == pytest.approx((5e-4 + 5e-6) / 2)

    def test_continuous_and_bounded(self):
        cfg = TrainConfig()
        vals = np.array([lr_schedule(s, 2000, cfg) for s in range(2001)])
        assert np.max(np.abs(np.diff(vals))) < 5e-6
        assert vals.max() <= 5e-4 + 1e-15 and vals.min() >= 5e-6 - 1e-15
        with pytest.raises(ValueError):
            lr_schedule(2001, 2000, cfg)

    def test_config_roundtrip(self):
        cfg = TrainConfig(epochs=7, loss=LossConfig(q=0.3), specaug=None)
        back = TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"nope": 1})


class TestModel:
    def test_pooling_invariances(self):
        torch.manual_seed(0)
        f = torch.randn(3, 5, 4, 6)
        out = pool_features(f)
        assert out.shape == (3, 5)
        # frequency permutation leaves max unchanged; time permutation leaves mean unchanged
        assert torch.allclose(pool_features(f[:, :, torch.randperm(4)]), out)
        assert torch.allclose(pool_features(f[:, :, :, torch.randperm(6)]), out, atol=1e-6)

    def test_shapes_and_probs(self):
        m = DualHeadModel(5, widths=(4, 8))
        zc, zn = m(torch.randn(2, 1, 64, 800))
        assert zc.shape == zn.shape == (2, 5)
        pc, pn = m.probs(torch.randn(2, 1, 64, 690))
        assert torch.allclose(pc.sum(1), torch.ones(2)) and torch.allclose(pn.sum(1), torch.ones(2))
        ml = DualHeadModel(5, multilabel=True, widths=(4, 8))
        pc, _ = ml.probs(torch.randn(2, 1, 64, 100))
        assert not torch.allclose(pc.sum(1), torch.ones(2))

    def test_forward_rep_mismatch(self):
        m = DualHeadModel(3, RepKind.LOGMEL, widths=(4,))
        rep = TimeFreqRep(np.zeros((64, 690)), RepKind.CQT, 256 / SR)
        with pytest.raises(RepMismatch):
            forward(m, rep)
        pc, pn = forward(m, TimeFreqRep(np.zeros((64, 800)), RepKind.LOGMEL, 0.005))
        assert pc.shape == (3,)

    def test_custom_backbone(self):
        class Tiny(torch.nn.Module):
            out_channels = 2

            def forward(self, x):
                return torch.cat([x, -x], dim=1)

        m = DualHeadModel(4, backbone=Tiny())
        assert m(torch.randn(1, 1, 8, 8))[0].shape == (1, 4)


class TestAugment:
    def test_mixup_identities(self):
        rng = np.random.default_rng(0)
        xs = rng.normal(size=(6, 2, 3))
        ys = np.eye(6)
        mx, my, g = mixup(xs, ys, rng, 1.0, gammas=np.ones(6))
        np.testing.assert_allclose(mx, xs)
        np.testing.assert_allclose(my, ys)
        mx, my, g = mixup(xs, ys, np.random.default_rng(1), 1.0)
        np.testing.assert_allclose(my.sum(1), 1.0)
        partner = np.random.default_rng(1).permutation(6)
        np.testing.assert_allclose(mx, g[:, None, None] * xs + (1 - g[:, None, None]) * xs[partner])

    def test_mixup_gamma_uniform(self):
        rng = np.random.default_rng(2)
        gs = np.concatenate([mixup(np.zeros((64, 1)), np.zeros((64, 2)), rng)[2] for _ in range(80)])
        assert stats.kstest(gs, "uniform").pvalue > 0.01

    def test_specaug_bounds(self):
        rng = np.random.default_rng(0)
        cfg = SpecAugConfig()
        fill = -23.0
        for _ in range(200):
            v = spec_augment(np.zeros((64, 800)), rng, cfg, np.full(64, fill))
            masked_rows = np.all(v == fill, axis=1).sum()
            masked_cols = np.all(v == fill, axis=0).sum()
            assert masked_rows <= 6 + (800 if masked_cols == 800 else 0)
            assert masked_cols <= 160 or masked_rows == 64

    def test_specaug_uses_rep_silence(self):
        rep = TimeFreqRep(np.ones((64, 100)), RepKind.SPEC, 0.005)
        out = spec_augment(rep, np.random.default_rng(3), SpecAugConfig(max_time_fraction=0.5))
        assert set(np.unique(out.values)) <= {0.0, 1.0}
        assert np.array_equal(rep.values, np.ones((64, 100)))


class TestTrainer:
    def test_overfits_single_batch(self):
        store, items = tiny_store(4)
        cfg = small_cfg(epochs=150, mixup_alpha=0.0, specaug=None, lr_peak=1e-2, lr_min_warm=1e-3,
                        lr_final=1e-3, batch_size=4)
        t = Trainer(cfg, 3, store, 1)
        for _ in range(150):
            out = t.train_epoch(items)
        assert out["loss_c"] < 0.01

    def test_heads_isolated(self):
        store, items = tiny_store(8)
        cfg = small_cfg(mixup_alpha=0.0, weight_decay=0.0)
        for curated, noisy, frozen in ((items, (), "head_n"), ((), items, "head_c")):
            t = Trainer(cfg, 3, store, 2)
            head = getattr(t.model, frozen)
            before = {k: v.clone() for k, v in head.state_dict().items()}
            t.train_epoch(curated, noisy)
            assert all(torch.equal(before[k], head.state_dict()[k]) for k in before)

    def test_lambda_zero_matches_curated_only_gradients(self):
        store, items = tiny_store(8)
        cfg = small_cfg(mixup_alpha=0.0, specaug=None, loss=LossConfig(lambda_=0.0))
        t = Trainer(cfg, 3, store, 2)
        xc, yc = t.make_stream(items[:4], augment=False)
        xn, yn = t.make_stream(items[4:], augment=False)
        t.model.zero_grad()
        risk, _, _ = t.batch_loss(xc, yc, xn, yn)
        risk.backward()
        assert all(p.grad is None or torch.count_nonzero(p.grad) == 0 for p in t.model.head_n.parameters())

    def test_empty_train_set(self):
        store, _ = tiny_store(2)
        with pytest.raises(EmptyTrainSet):
            Trainer(small_cfg(), 3, store, 1).train_epoch([], [])

    def test_store_kind_checked(self):
        store, _ = tiny_store(2, kind=RepKind.CQT, frames=690)
        with pytest.raises(RepMismatch):
            Trainer(small_cfg(), 3, store, 1)

    def test_deterministic(self):
        store, items = tiny_store(12)
        runs = []
        for _ in range(2):
            t = Trainer(small_cfg(), 3, store, 3)
            hist = [t.train_epoch(items[:6], items[6:]) for _ in range(3)]
            runs.append((hist, t.predict_items(items)))
        assert runs[0][0] == runs[1][0]
        assert np.array_equal(runs[0][1], runs[1][1])

    def test_checkpoint_resume(self, tmp_path):
        store, items = tiny_store(12)
        t = Trainer(small_cfg(), 3, store, 3)
        t.train_epoch(items)
        save_checkpoint(tmp_path / "c.pt", {"trainer": t.state_dict()})
        ref = [t.train_epoch(items) for _ in range(2)]
        u = Trainer(small_cfg(), 3, store, 3)
        u.load_state_dict(load_checkpoint(tmp_path / "c.pt")["trainer"])
        again = [u.train_epoch(items) for _ in range(2)]
        assert [r["loss_c"] for r in again] == [r["loss_c"] for r in ref]
        for a, b in zip(t.model.parameters(), u.model.parameters()):
            assert torch.equal(a, b)

    def test_checkpoint_header(self, tmp_path):
        save_checkpoint(tmp_path / "c.pt", {"x": 1})
        raw = torch.load(tmp_path / "c.pt", weights_only=False)
        assert raw["format"] == "crossfilter-checkpoint" and raw["version"] == 1
        torch.save({"foo": 1}, tmp_path / "bad.pt")
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "bad.pt")


class TestInference:
    def test_short_clip_single_segment(self):
        torch.manual_seed(0)
        m = DualHeadModel(3, widths=(4, 8))
        rng = np.random.default_rng(0)
        clip = AudioClip(rng.normal(0, 0.1, int(2.5 * SR)), SR)
        out = predict_clip(m, clip, np.random.default_rng(1))
        rep = represent(clip, RepKind.LOGMEL)
        pad = 800 - rep.n_frames
        full = np.repeat(rep.silence()[:, None], 800, 1)
        full[:, pad // 2 : pad // 2 + rep.n_frames] = rep.values
        single, _ = forward(m, rep.replace(full))
        np.testing.assert_allclose(out, single, atol=1e-6)

    def test_long_clip_averages_crops(self):
        torch.manual_seed(0)
        m = DualHeadModel(3, widths=(4,))
        rep = TimeFreqRep(np.random.default_rng(0).normal(size=(64, 1200)), RepKind.LOGMEL, 0.005)
        out = predict_rep(m, rep, np.random.default_rng(5), n_segments=5)
        rng = np.random.default_rng(5)
        ps = []
        for _ in range(5):
            s = int(rng.integers(0, 401))
            ps.append(forward(m, rep.replace(rep.values[:, s : s + 800]))[0])
        np.testing.assert_allclose(out, np.mean(ps, axis=0), atol=1e-6)
        assert out.sum() == pytest.approx(1.0)

    def test_ensemble_ranking(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
            s = ensemble(a, b)
            np.testing.assert_allclose(s, a + b)
            assert np.array_equal(np.argsort(-s, kind="stable"), np.argsort(-(a + b) / 2, kind="stable"))
        with pytest.raises(ValueError):
            ensemble(np.ones(3), np.ones(4))
