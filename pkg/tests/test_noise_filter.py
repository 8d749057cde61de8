import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossfilter.data import BiQualityDataset, Item
from crossfilter.errors import PredCoverage
from crossfilter.noise_filter import (FilterConfig, PartitionState, agree, filter_epoch, run_noise_filtering,
                                      selection_audit, step_schedule)


def make_dataset(n_cur, noisy_labels, J, true_labels=None):
    cur = [Item(f"c{i}", (i % J,)) for i in range(n_cur)]
    truth = true_labels if true_labels is not None else [None] * len(noisy_labels)
    noisy = [Item(f"n{i}", (int(l),), true_labels=None if t is None else (int(t),))
             for i, (l, t) in enumerate(zip(noisy_labels, truth))]
    return BiQualityDataset([f"k{j}" for j in range(J)], cur, noisy)


def onehot_preds(classes, J):
    p = np.full((len(classes), J), 0.1 / max(J - 1, 1))
    p[np.arange(len(classes)), classes] = 0.9
    return p


def replay(p1, p2, labels, k, order, J):
    """Straight transcription of the selection rule, used as an oracle."""
    into1, into2 = [], []
    cnt1, cnt2 = [0] * J, [0] * J
    for idx in order:
        a = max(range(J), key=lambda c: (p1[idx][c], -c))
        if a == labels[idx] and cnt2[a] < k:
            into2.append(idx)
            cnt2[a] += 1
        b = max(range(J), key=lambda c: (p2[idx][c], -c))
        if b == labels[idx] and cnt1[b] < k:
            into1.append(idx)
            cnt1[b] += 1
    return into1, into2


class TestAgree:
    def test_single_label(self):
        assert agree(1, [0.2, 0.7, 0.1])
        assert not agree(0, [0.2, 0.7, 0.1])

    def test_multi_hot(self):
        assert agree([1, 0, 1], [0.1, 0.2, 0.7])
        assert not agree([1, 0, 1], [0.1, 0.8, 0.1])

    def test_tie_goes_low(self):
        assert agree(0, [0.5, 0.5])
        assert not agree(1, [0.5, 0.5])


class TestSchedule:
    def test_values(self):
        assert step_schedule(0, 60, 800, 8) == 0
        assert step_schedule(1, 60, 800, 8) == 3
        assert step_schedule(15, 60, 800, 8) == 50
        assert step_schedule(30, 60, 800, 8) == 100
        assert step_schedule(60, 60, 800, 8) == 100

    def test_rounding_and_caps(self):
        # k_max = ceil(10/3) = 4; at 1/4 of the ramp 4*0.25 = 1.0
        assert step_schedule(1, 8, 10, 3) == 1
        assert step_schedule(2, 8, 10, 3) == 2
        with pytest.raises(ValueError):
            step_schedule(9, 8, 10, 3)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 200), st.integers(0, 2000), st.integers(1, 20))
    def test_monotone_bounded(self, E, n, J):
        ks = [step_schedule(j, E, n, J) for j in range(E + 1)]
        assert all(a <= b for a, b in zip(ks, ks[1:]))
        assert ks[-1] == math.ceil(n / J)
        assert ks[0] == 0


class TestFilterEpoch:
    def test_hand_trace(self):
        # noisy a (given 0), b (given 1), c (given 0); M1 predicts [0, 0, 0], M2 [1, 1, 0]
        ds = make_dataset(2, [0, 1, 0], 2)
        p1 = onehot_preds([0, 0, 0], 2)
        p2 = onehot_preds([1, 1, 0], 2)
        st_ = filter_epoch(p1, p2, ds, k=5, rng=np.random.default_rng(0))
        assert sorted(st_.pseudo(2)) == ["n0", "n2"]  # M1 agreed on a and c
        assert sorted(st_.pseudo(1)) == ["n1", "n2"]  # M2 agreed on b and c
        np.testing.assert_array_equal(st_.delta, [[1, 1], [2, 0]])
        cur2, rest2 = st_.partition(2, ds)
        assert {it.clip_id for it in cur2} == {"c0", "c1", "n0", "n2"}
        assert [it.clip_id for it in rest2] == ["n1"]

    def test_cap_binds(self):
        ds = make_dataset(1, [0] * 10, 2)
        p = onehot_preds([0] * 10, 2)
        st_ = filter_epoch(p, p, ds, k=3, rng=np.random.default_rng(0))
        assert len(st_.pseudo(1)) == len(st_.pseudo(2)) == 3
        assert not st_.violations(ds)

    def test_only_peer_choices_matter(self):
        # M1 disagrees with everything, so C^2 stays empty whatever M2 says
        ds = make_dataset(1, [0, 1, 0, 1], 2)
        wrong = onehot_preds([1, 0, 1, 0], 2)
        right = onehot_preds([0, 1, 0, 1], 2)
        st_ = filter_epoch(wrong, right, ds, k=10, rng=np.random.default_rng(3))
        assert st_.pseudo(2) == [] and len(st_.pseudo(1)) == 4

    def test_k_zero(self):
        ds = make_dataset(1, [0, 1], 2)
        p = onehot_preds([0, 1], 2)
        rng = np.random.default_rng(0)
        st_ = filter_epoch(p, p, ds, 0, rng)
        assert st_.pseudo(1) == [] and st_.pseudo(2) == []
        # the shuffle is still consumed
        ref = np.random.default_rng(0)
        ref.permutation(2)
        assert rng.bit_generator.state == ref.bit_generator.state

    def test_mapping_input_and_coverage(self):
        ds = make_dataset(1, [0, 1], 2)
        p = {"n0": [0.9, 0.1], "n1": [0.2, 0.8]}
        st_ = filter_epoch(p, p, ds, 2, np.random.default_rng(0))
        assert sorted(st_.pseudo(1)) == ["n0", "n1"]
        with pytest.raises(PredCoverage):
            filter_epoch({"n0": [0.9, 0.1]}, p, ds, 2, np.random.default_rng(0))
        with pytest.raises(PredCoverage):
            filter_epoch(np.ones((1, 2)), p, ds, 2, np.random.default_rng(0))

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6), st.integers(0, 40), st.integers(0, 12))
    def test_matches_replay(self, seed, J, n, k):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, J, n)
        ds = make_dataset(J, labels, J)
        p1 = rng.dirichlet(np.ones(J), n) if n else np.zeros((0, J))
        p2 = rng.dirichlet(np.ones(J), n) if n else np.zeros((0, J))
        st_ = filter_epoch(p1, p2, ds, k, np.random.default_rng(seed))
        order = np.random.default_rng(seed).permutation(n)
        into1, into2 = replay(p1, p2, labels, k, order, J) if k else ([], [])
        assert st_.pseudo(1) == [f"n{i}" for i in into1]
        assert st_.pseudo(2) == [f"n{i}" for i in into2]
        assert not st_.violations(ds)

    def test_perfect_predictors(self):
        rng = np.random.default_rng(0)
        J, n = 8, 800
        truth = rng.integers(0, J, n)
        given_ = truth.copy()
        flip = rng.random(n) < 0.3
        given_[flip] = (truth[flip] + rng.integers(1, J, flip.sum())) % J
        ds = make_dataset(16, given_, J, truth)
        p = onehot_preds(truth, J)
        k_max = step_schedule(10, 10, n, J)
        st_ = filter_epoch(p, p, ds, k_max, np.random.default_rng(1))
        audit = selection_audit(st_, ds)
        assert audit["precision_1"] == audit["precision_2"] == 1.0
        assert audit["recall_1"] >= 0.95 and audit["recall_2"] >= 0.95


def test_state_roundtrip():
    ds = make_dataset(2, [0, 1, 1], 2)
    st_ = filter_epoch(onehot_preds([0, 1, 1], 2), onehot_preds([0, 0, 1], 2), ds, 2, np.random.default_rng(0), 4)
    back = PartitionState.from_dict(st_.to_dict())
    assert back.pseudo_ids == st_.pseudo_ids and back.k == 2 and back.epoch == 4
    np.testing.assert_array_equal(back.delta, st_.delta)


def test_violations_detected():
    ds = make_dataset(2, [0, 1], 2)
    bad = PartitionState(2, (["n0", "n0"], ["c0"]), np.array([[2, 0], [0, 0]]), k=1)
    msgs = bad.violations(ds)
    assert any("cap" in m for m in msgs)
    assert any("duplicate" in m for m in msgs)
    assert any("out of sync" in m for m in msgs)


class TestLoop:
    def _run(self, epochs=50, enabled=True, seed=0):
        rng = np.random.default_rng(seed)
        J, n = 5, 200
        truth = rng.integers(0, J, n)
        given_ = np.where(rng.random(n) < 0.3, rng.integers(0, J, n), truth)
        ds = make_dataset(20, given_, J, truth)
        seen = []
        noise_rng = np.random.default_rng(seed + 1)

        def train_fn(r, cur, noisy, epoch):
            seen.append((epoch, r, {it.clip_id for it in cur}, {it.clip_id for it in noisy}))
            return {"loss_c": 1.0 / epoch}

        def predict_fn(r, items):
            # noisy-but-decent predictor: right 70% of the time
            guess = np.where(noise_rng.random(len(items)) < 0.7, truth, noise_rng.integers(0, J, len(items)))
            return onehot_preds(guess, J)

        state, hist = run_noise_filtering(ds, epochs, train_fn, predict_fn, np.random.default_rng(seed),
                                          FilterConfig(enabled=enabled))
        return ds, state, hist, seen

    def test_invariants_every_epoch(self):
        ds, state, hist, seen = self._run()
        assert len(hist) == 50
        everything = {it.clip_id for it in ds.curated} | {it.clip_id for it in ds.noisy}
        base = {it.clip_id for it in ds.curated}
        for epoch, r, cur, noisy in seen:
            assert cur | noisy == everything and not cur & noisy and base <= cur
        assert all(row["violations"] == 0 for row in hist)
        for row in hist:
            assert row["pseudo_count_1"] <= min(len(ds.noisy), ds.J * row["k"])
        assert hist[0]["k"] == 0 and hist[0]["pseudo_count_1"] == 0
        assert hist[-1]["k"] == math.ceil(len(ds.noisy) / ds.J)

    def test_partitions_feed_next_epoch(self):
        ds, state, hist, seen = self._run(epochs=6)
        last = [s for s in seen if s[0] == 6]
        for _, r, cur, _ in last:
            assert len(cur) == len(ds.curated) + hist[4][f"pseudo_count_{r}"]

    def test_disabled(self):
        ds, state, hist, seen = self._run(epochs=5, enabled=False)
        assert all(row["pseudo_count_1"] == row["pseudo_count_2"] == 0 for row in hist)
        assert all(len(cur) == len(ds.curated) for _, _, cur, _ in seen)

    def test_resume_equivalence(self):
        full = self._run(epochs=8)[2]
        # same loop split at epoch 3 reproduces the selection counts
        rng = np.random.default_rng(0)
        J, n = 5, 200
        truth = rng.integers(0, J, n)
        given_ = np.where(rng.random(n) < 0.3, rng.integers(0, J, n), truth)
        ds = make_dataset(20, given_, J, truth)
        noise_rng = np.random.default_rng(1)

        def predict_fn(r, items):
            guess = np.where(noise_rng.random(len(items)) < 0.7, truth, noise_rng.integers(0, J, len(items)))
            return onehot_preds(guess, J)

        sel_rng = np.random.default_rng(0)
        train_fn = lambda r, cur, noisy, epoch: {"loss_c": 1.0 / epoch}
        state, hist = run_noise_filtering(ds, 8, train_fn, predict_fn, sel_rng, end_epoch=3)
        state = PartitionState.from_dict(state.to_dict())
        state, hist = run_noise_filtering(ds, 8, train_fn, predict_fn, sel_rng, state=state,
                                          start_epoch=4, history=hist)
        assert hist == full
