import numpy as np
import pytest
from hypothesis import given, strategies as st

from taskweight.features import FeatureSet
from taskweight.metrics import (binarize_event_roll, evaluate, event_counts, event_metrics, read_report_csv,
                                scene_metrics)


def brute_counts(pred, ref):
    l, m = pred.shape
    tp, fp, fn = [0] * m, [0] * m, [0] * m
    for i in range(l):
        for j in range(m):
            p, r = bool(pred[i, j]), bool(ref[i, j])
            tp[j] += p and r
            fp[j] += p and not r
            fn[j] += r and not p
    return tp, fp, fn


def brute_f(tp, fp, fn):
    return 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0


class TestBinarize:
    def test_boundary(self):
        np.testing.assert_array_equal(binarize_event_roll(np.full((3, 2), 0.5)), 0)
        np.testing.assert_array_equal(binarize_event_roll(np.full((3, 2), 0.9)), 1)

    def test_mixed(self, rng):
        y = rng.random((10, 4))
        np.testing.assert_array_equal(binarize_event_roll(y, 0.3), (y > 0.3).astype(np.uint8))


class TestScene:
    def test_perfect(self):
        r = scene_metrics([0, 1, 2, 3], [0, 1, 2, 3], 4)
        assert r.micro_f == r.macro_f == 1.0
        np.testing.assert_array_equal(r.recall, 1.0)

    def test_one_class_predicted(self):
        r = scene_metrics([2] * 8, [0, 1, 2, 3] * 2, 4)
        assert r.micro_f == 0.25
        np.testing.assert_array_equal(r.recall, [0, 0, 1, 0])

    def test_absent_class_excluded(self):
        r = scene_metrics([0, 1, 1], [0, 1, 0], 3)
        assert r.f[2] == 0
        assert r.macro_f == pytest.approx(np.mean([2 / 3, 2 / 3]))

    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40))
    def test_micro_is_accuracy(self, pairs):
        pred, ref = zip(*pairs)
        r = scene_metrics(pred, ref, 5)
        assert r.micro_f == sum(p == q for p, q in pairs) / len(pairs)

    def test_errors(self):
        with pytest.raises(ValueError):
            scene_metrics([0, 1], [0], 2)
        with pytest.raises(ValueError):
            scene_metrics([], [], 2)


class TestEvent:
    def test_perfect_and_empty(self, rng):
        ref = (rng.random((10, 3)) < 0.5).astype(int)
        ref[0] = 1
        r = event_metrics(ref, ref)
        assert r.micro_f == r.macro_f == 1.0
        r = event_metrics(np.zeros_like(ref), ref)
        assert r.micro_f == 0.0
        np.testing.assert_array_equal(r.f, 0.0)

    def test_counting_oracle(self):
        pred = np.array([[1], [1], [1], [0], [0]])
        ref = np.array([[1], [1], [0], [1], [0]])
        r = event_metrics(pred, ref)
        assert (r.tp[0], r.fp[0], r.fn[0]) == (2, 1, 1)
        assert r.f[0] == pytest.approx(2 / 3)

    def test_brute_force_equivalence(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            l, m = rng.integers(1, 21), rng.integers(1, 6)
            pred = (rng.random((l, m)) < rng.random()).astype(np.uint8)
            ref = (rng.random((l, m)) < rng.random()).astype(np.uint8)
            tp, fp, fn = brute_counts(pred, ref)
            r = event_metrics(pred, ref)
            assert r.tp.tolist() == tp and r.fp.tolist() == fp and r.fn.tolist() == fn
            assert r.micro_f == brute_f(sum(tp), sum(fp), sum(fn))

    @given(st.integers(0, 2 ** 32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pred = (rng.random((15, 5)) < 0.4).astype(int)
        ref = (rng.random((15, 5)) < 0.4).astype(int)
        perm = rng.permutation(5)
        a, b = event_metrics(pred, ref), event_metrics(pred[:, perm], ref[:, perm])
        np.testing.assert_array_equal(a.f[perm], b.f)
        assert a.micro_f == b.micro_f
        assert a.macro_f == pytest.approx(b.macro_f, abs=1e-15)

    def test_clip_additivity(self, rng):
        pred = (rng.random((3, 8, 2)) < 0.5).astype(int)
        ref = (rng.random((3, 8, 2)) < 0.5).astype(int)
        total = np.array(event_counts(pred, ref))
        parts = sum(np.array(event_counts(pred[i], ref[i])) for i in range(3))
        np.testing.assert_array_equal(total, parts)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            event_metrics(np.zeros((2, 3)), np.zeros((3, 2)))


class _FixedModel:
    """Stand-in returning fixed posteriors, to recount metrics independently."""

    def __init__(self, ys, ye, n, m):
        from taskweight.model import ArchConfig
        self.arch = ArchConfig(n_scenes=n, n_events=m)
        self.ys, self.ye, self.pos = ys, ye, 0

    def forward(self, x, train=False):
        from taskweight.autodiff import Tensor
        from taskweight.model import ModelOutput
        b = len(x)
        out = ModelOutput(Tensor(self.ys[self.pos:self.pos + b]), Tensor(self.ye[self.pos:self.pos + b]))
        self.pos += b
        return out


def test_evaluate_matches_independent_recount(rng):
    n_clips, l, n, m = 20, 12, 3, 4
    fs = FeatureSet(rng.standard_normal((n_clips, 5, l)), rng.integers(0, n, n_clips),
                    (rng.random((n_clips, l, m)) < 0.3).astype(np.uint8), [str(i) for i in range(n_clips)],
                    ["a", "b", "c"], ["w", "x", "y", "z"])
    ys = rng.dirichlet(np.ones(n), n_clips)
    ye = rng.random((n_clips, l, m))
    report = evaluate(_FixedModel(ys, ye, n, m), fs)
    pred = ye > 0.5
    ref = fs.rolls.astype(bool)
    tp, fp, fn = (pred & ref).sum(), (pred & ~ref).sum(), (~pred & ref).sum()
    assert report.event.micro_f == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-15)
    per = [brute_f(*(int(v) for v in c)) for c in zip((pred & ref).sum((0, 1)), (pred & ~ref).sum((0, 1)),
                                                         (~pred & ref).sum((0, 1)))]
    assert report.event.macro_f == pytest.approx(np.mean(per), abs=1e-15)
    assert report.scene.micro_f == np.mean(ys.argmax(1) == fs.scenes)
    parsed = read_report_csv(report.to_csv())
    for metric, cls, value in report.rows():
        assert parsed[(metric, cls)] == pytest.approx(value, rel=1e-11)
    table = report.to_table()
    assert f"{report.scene.micro_f:.6f}" in table and f"{report.event.macro_f:.6f}" in table
