import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mug import diffcore as dc
from mug.diffcore import Tensor, finite_diff_check
from mug.errors import ShapeError
from mug.fusion import (
    MUGModel,
    cross_attention,
    cross_granularity_block,
    fine_fuse,
    fuse_weights,
    init_fusion_params,
    mug_represent,
    represent_series,
)
from mug.tsdata import CorruptionSpec, Dataset, TimeSeries, make_synthetic, splice_confusion


def softmax_list(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    return [v / sum(e) for v in e]


def identity_params(d=2, d_ff=3):
    p = init_fusion_params(d, d, d, d_ff, np.random.default_rng(0))
    for k in ("Wq", "Wk", "Wv"):
        p[k].data = np.eye(d)
    return p


class TestFineFuse:
    def test_single_row(self, rng):
        v = rng.normal(size=(1, 5))
        np.testing.assert_array_equal(fine_fuse(v).data, v[0])

    def test_identical_rows(self, rng):
        row = rng.normal(size=4)
        np.testing.assert_allclose(fine_fuse(np.tile(row, (6, 1))).data, row, atol=1e-15)

    def test_hand_evaluated(self):
        w1, w2 = softmax_list([4 / math.sqrt(2), 1 / math.sqrt(2)])
        out = fine_fuse([[2.0, 0.0], [0.0, 1.0]]).data
        np.testing.assert_allclose(out, [2 * w1, w2], rtol=0, atol=1e-15)

    def test_batched(self, rng):
        v = rng.normal(size=(3, 5, 4))
        out = fine_fuse(v).data
        for b in range(3):
            np.testing.assert_allclose(out[b], fine_fuse(v[b]).data, atol=1e-15)

    @given(st.integers(1, 12), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_convex_hull(self, j, d, seed):
        v = np.random.default_rng(seed).normal(size=(j, d)) * 3
        w = fuse_weights(v).data[0]
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
        out = fine_fuse(v).data
        assert np.all(out <= v.max(axis=0) + 1e-12) and np.all(out >= v.min(axis=0) - 1e-12)

    def test_scale_sensitivity(self, rng):
        v = rng.normal(size=(6, 4))
        assert not np.allclose(fuse_weights(v).data, fuse_weights(10 * v).data)

    def test_gradient_check(self, rng):
        w = rng.normal(size=3)
        report = finite_diff_check(lambda t: (fine_fuse(t) * w).sum(), Tensor(rng.normal(size=(5, 3))))
        assert report.passed


class TestCrossAttention:
    def test_single_token_gives_value_row(self, rng):
        p = init_fusion_params(4, 3, 5, 6, rng)
        tokens = rng.normal(size=(1, 3))
        for _ in range(3):
            out = cross_attention(rng.normal(size=4), tokens, p).data
            np.testing.assert_allclose(out, tokens[0] @ p["Wv"].data, atol=1e-14)

    def test_identical_tokens(self, rng):
        p = init_fusion_params(4, 3, 5, 6, rng)
        tokens = np.tile(rng.normal(size=3), (4, 1))
        out = cross_attention(rng.normal(size=4), tokens, p).data
        np.testing.assert_allclose(out, tokens[0] @ p["Wv"].data, atol=1e-14)

    def test_hand_evaluated(self):
        w1, w2 = softmax_list([1 / math.sqrt(2), 0.0])
        out = cross_attention([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], identity_params()).data
        np.testing.assert_allclose(out, [w1, w2], rtol=0, atol=1e-15)

    @given(st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_output_is_convex_combination_of_values(self, n_tokens, seed):
        g = np.random.default_rng(seed)
        p = init_fusion_params(4, 3, 2, 5, g)
        q, tokens = g.normal(size=4), g.normal(size=(n_tokens, 3))
        values = tokens @ p["Wv"].data
        scores = (q @ p["Wq"].data) @ (tokens @ p["Wk"].data).T / math.sqrt(2)
        weights = np.array(softmax_list(list(scores)))
        out = cross_attention(q, tokens, p).data
        np.testing.assert_allclose(out, weights @ values, atol=1e-12)
        assert out.shape == (4,)

    def test_dimension_mismatch(self, rng):
        p = init_fusion_params(4, 3, 5, 6, rng)
        with pytest.raises(ShapeError):
            cross_attention(rng.normal(size=4), rng.normal(size=(2, 4)), p)
        with pytest.raises(ShapeError):
            cross_attention(rng.normal(size=5), rng.normal(size=(2, 3)), p)


class TestBlock:
    def test_residual_isolation(self, rng):
        p = init_fusion_params(4, 3, 5, 6, rng)
        p["Wv"].data = np.zeros((3, 4))
        p["ff.W1"].data = np.zeros((4, 6))
        p["ff.W2"].data = np.zeros((6, 4))
        for k in ("ln1.g", "ln1.b", "ln2.g", "ln2.b", "ff.b1", "ff.b2"):
            p[k].data = rng.normal(size=p[k].shape)
        p["ff.b2"].data = np.zeros(4)
        v = rng.normal(size=4)
        out = cross_granularity_block(v, rng.normal(size=(3, 3)), p).data
        expected = dc.layer_norm(dc.layer_norm(v, p["ln1.g"], p["ln1.b"]), p["ln2.g"], p["ln2.b"]).data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    @given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_shape(self, batch, n_tokens, seed):
        g = np.random.default_rng(seed)
        p = init_fusion_params(6, 3, 2, 5, g)
        out = cross_granularity_block(g.normal(size=(batch, 6)), g.normal(size=(batch, n_tokens, 3)), p)
        assert out.shape == (batch, 6)

    def test_gradient_check_on_hand_example(self, rng):
        p = identity_params()
        for t in p.values():
            t.data = t.data + rng.normal(scale=0.3, size=t.shape)
        w = np.array([0.7, -1.3])
        report = finite_diff_check(
            lambda: (cross_granularity_block(Tensor([1.0, 0.0]), Tensor([[1.0, 0.0], [0.0, 1.0]]), p) * w).sum(),
            list(p.values()),
        )
        assert report.passed, report.max_rel_error


def toy_series(n=3, w=16, seed=0):
    g = np.random.default_rng(seed)
    return [TimeSeries(np.sin(np.linspace(0, 4, w) * (k + 1)) + 0.1 * g.normal(size=w), k % 2) for k in range(n)]


class TestMugRepresent:
    def test_single_segment(self, tiny_config):
        model = MUGModel(tiny_config, seed=1)
        ts = toy_series(1)[0]
        z = (ts.values - ts.values.mean()) / ts.values.std()
        seg_rep = model.segment_representation(z[None], "multi")[0]
        np.testing.assert_allclose(mug_represent(ts, model, num_segments=1), seg_rep, atol=1e-12)

    def test_mean_of_segments(self, tiny_config):
        model = MUGModel(tiny_config, seed=1)
        ts = toy_series(1)[0]
        z = (ts.values - ts.values.mean()) / ts.values.std()
        parts = model.segment_representation(np.stack([z[:8], z[8:]]), "multi")
        np.testing.assert_allclose(mug_represent(ts, model), parts.mean(axis=0), atol=1e-12)

    def test_identical_series(self, tiny_config):
        model = MUGModel(tiny_config, seed=1)
        ts = toy_series(1)[0]
        a = mug_represent(ts, model)
        b = mug_represent(TimeSeries(ts.values.copy()), model)
        assert a.tobytes() == b.tobytes()

    def test_splice_changes_representation(self, tiny_config):
        model = MUGModel(tiny_config, seed=1)
        ds = make_synthetic(["sine", "square"], n=6, length=32, seed=2)
        ts = ds.series[0]
        spliced = splice_confusion(ts, ds, CorruptionSpec(splice_fraction=0.5, splice_count=1, rng_seed=3))
        assert np.linalg.norm(mug_represent(ts, model) - mug_represent(spliced, model)) > 0

    @pytest.mark.parametrize("variant,width", [("multi", 8), ("fine", 8), ("coarse", 6)])
    def test_represent_series_widths(self, tiny_config, variant, width):
        model = MUGModel(tiny_config, seed=1)
        reps = represent_series(Dataset(toy_series(4, w=17), ["a", "b"]), model, variant)
        assert reps.shape == (4, width) and np.isfinite(reps).all()

    @pytest.mark.parametrize("group", ["fine", "coarse", "fusion"])
    def test_end_to_end_gradient(self, tiny_config, group):
        model = MUGModel(tiny_config, seed=4)
        segs = np.random.default_rng(0).normal(size=(2, 6, 1))
        w = np.random.default_rng(1).normal(size=(2, 8))

        def loss():
            out = model.forward_segments(segs)
            return (dc.tanh(out.multi) * w).sum()

        report = finite_diff_check(loss, model.parameters((group,)))
        assert report.passed, report.max_rel_error

    def test_unknown_variant(self, tiny_config):
        with pytest.raises(ValueError):
            MUGModel(tiny_config).segment_representation(np.zeros((1, 6, 1)), "both")
