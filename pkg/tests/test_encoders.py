from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mug import diffcore as dc
from mug.config import FineEncoderConfig, SaxConfig
from mug.diffcore import backward, finite_diff_check
from mug.encoders import (
    coarse_encode,
    fine_encode,
    fine_encode_batch,
    init_coarse_params,
    init_fine_params,
    paa,
    paa_batch,
    sax_breakpoints,
    sax_symbolize,
    sax_word,
)
from mug.errors import ContractError
from mug.tsdata import Segment


def seg(values):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    return Segment("s", 0, len(values), values)


def fine_setup(m=2, d=8, heads=2, layers=1, positional=True, seed=0):
    cfg = FineEncoderConfig(input_dim=m, d_model=d, n_heads=heads, n_layers=layers, d_ff=12, dropout=0.0,
                            positional=positional)  # fmt: skip
    return cfg, init_fine_params(cfg, np.random.default_rng(seed))


class TestFineEncoder:
    @given(st.integers(1, 9), st.integers(1, 3), st.sampled_from([(4, 1), (4, 2), (6, 3), (8, 4)]))
    def test_shape(self, j, m, dh):
        d, h = dh
        cfg, params = fine_setup(m=m, d=d, heads=h)
        x = np.random.default_rng(j).normal(size=(j, m))
        out = fine_encode(seg(x), cfg, params).data
        assert out.shape == (j, d) and np.isfinite(out).all()

    def test_batched_matches_single(self, rng):
        cfg, params = fine_setup()
        x = rng.normal(size=(3, 5, 2))
        batched = fine_encode_batch(x, cfg, params).data
        for b in range(3):
            np.testing.assert_allclose(batched[b], fine_encode(seg(x[b]), cfg, params).data, atol=1e-12)

    def test_permutation_equivariance_without_positions(self, rng):
        cfg, params = fine_setup(positional=False, layers=2)
        x = rng.normal(size=(6, 2))
        perm = np.array([0, 4, 2, 3, 1, 5])
        out = fine_encode(seg(x), cfg, params).data
        out_p = fine_encode(seg(x[perm]), cfg, params).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_positions_break_equivariance(self, rng):
        cfg, params = fine_setup()
        x = rng.normal(size=(6, 2))
        perm = np.array([0, 4, 2, 3, 1, 5])
        out = fine_encode(seg(x), cfg, params).data
        assert not np.allclose(fine_encode(seg(x[perm]), cfg, params).data, out[perm])

    def test_deterministic(self, rng):
        cfg, params = fine_setup()
        x = rng.normal(size=(6, 2))
        a, b = fine_encode(seg(x), cfg, params).data, fine_encode(seg(x), cfg, params).data
        assert a.tobytes() == b.tobytes()

    def test_too_long(self):
        cfg = FineEncoderConfig(input_dim=1, d_model=4, n_heads=1, n_layers=1, d_ff=4, max_len=5)
        params = init_fine_params(cfg, np.random.default_rng(0))
        with pytest.raises(ContractError, match="max_len"):
            fine_encode(seg(np.zeros(6)), cfg, params)

    def test_gradient_check_all_parameters(self, rng):
        cfg, params = fine_setup(m=2, d=8, heads=2, layers=1)
        x = rng.normal(size=(6, 2))
        report = finite_diff_check(lambda: fine_encode(seg(x), cfg, params).sum(), list(params.values()))
        assert report.passed, report.max_rel_error
        assert report.max_rel_error <= 1e-4

    def test_gradient_check_weighted_output(self, rng):
        # sum of a layer-normed output has near-zero gradients; a weighted sum exercises every path
        cfg, params = fine_setup(m=2, d=8, heads=2, layers=2)
        x = rng.normal(size=(6, 2))
        w = rng.normal(size=(6, 8))
        report = finite_diff_check(lambda: (fine_encode(seg(x), cfg, params) * w).sum(), list(params.values()))
        assert report.passed, report.max_rel_error


class TestPaa:
    def test_identity(self, rng):
        x = rng.normal(size=7)
        np.testing.assert_array_equal(paa(x, 7), x)

    def test_overall_mean(self, rng):
        x = rng.normal(size=7)
        assert paa(x, 1)[0] == pytest.approx(x.mean(), abs=1e-15)

    def test_example(self):
        np.testing.assert_array_equal(paa([1.0, 1.0, 3.0, 3.0], 2), [1.0, 3.0])

    def test_remainder_frames(self):
        np.testing.assert_allclose(paa([1.0, 2.0, 3.0, 10.0, 20.0], 2), [2.0, 15.0])

    def test_too_many_frames(self):
        with pytest.raises(ContractError):
            paa([1.0, 2.0], 3)

    @given(st.integers(1, 40), st.data())
    def test_batch_matches_loop(self, j, data):
        frames = data.draw(st.integers(1, j))
        x = np.random.default_rng(j).normal(size=(3, j, 2))
        out = paa_batch(x, frames)
        for b in range(3):
            np.testing.assert_allclose(out[b], paa(x[b], frames), atol=1e-12)


class TestSax:
    @pytest.mark.parametrize("a", [2, 3, 4, 5, 8, 16])
    def test_breakpoints_against_normal_quantiles(self, a):
        oracle = [NormalDist().inv_cdf(k / a) for k in range(1, a)]
        np.testing.assert_allclose(sax_breakpoints(a), oracle, atol=1e-12)

    def test_a4_example(self):
        np.testing.assert_allclose(sax_breakpoints(4), [-0.6745, 0.0, 0.6745], atol=1e-4)
        assert sax_symbolize(0.0, 4) == 2

    def test_left_closed_bins(self):
        bp = sax_breakpoints(4)
        assert sax_symbolize(bp[0], 4) == 1
        assert sax_symbolize(np.nextafter(bp[0], -np.inf), 4) == 0

    @pytest.mark.parametrize("a", [2, 5, 16])
    def test_extremes(self, a):
        assert sax_symbolize(-10.0, a) == 0
        assert sax_symbolize(10.0, a) == a - 1

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.integers(2, 16))
    def test_monotone(self, vals, a):
        sym = sax_symbolize(np.sort(vals), a)
        assert np.all(np.diff(sym) >= 0)
        assert sym.min() >= 0 and sym.max() < a

    def test_bin_occupancy(self):
        x = np.random.default_rng(0).standard_normal(100_000)
        freq = np.bincount(sax_symbolize(x, 4), minlength=4) / len(x)
        assert np.all(np.abs(freq - 0.25) <= 0.01)

    def test_multivariate_averages_channels(self):
        cfg = SaxConfig(alphabet_size=4, word_length=2, embed_dim=3)
        x = np.array([[1.0, -1.0], [1.0, -1.0], [2.0, 0.0], [2.0, 0.0]])
        # channel means per frame are [0, 1]
        np.testing.assert_array_equal(sax_word(x, cfg), sax_symbolize([0.0, 1.0], 4))


class TestCoarse:
    def setup_method(self):
        self.cfg = SaxConfig(alphabet_size=4, word_length=3, embed_dim=5)
        self.params = init_coarse_params(self.cfg, np.random.default_rng(0))

    def test_zero_segment(self):
        out = coarse_encode(seg(np.zeros(9)), self.cfg, self.params)
        np.testing.assert_array_equal(out.symbols, [2, 2, 2])
        table = self.params["table"].data
        np.testing.assert_array_equal(out.tokens.data, np.repeat(table[2:3], 3, axis=0))

    def test_same_word_same_tokens(self):
        a = coarse_encode(seg([-2.0, -2.1, 0.1, 0.2, 2.0, 2.5]), self.cfg, self.params)
        b = coarse_encode(seg([-1.5, -1.9, 0.05, 0.3, 1.2, 3.0]), self.cfg, self.params)
        np.testing.assert_array_equal(a.symbols, b.symbols)
        assert a.tokens.data.tobytes() == b.tokens.data.tobytes()

    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=20))
    def test_rows_are_table_rows(self, vals):
        out = coarse_encode(seg(vals), self.cfg, self.params)
        table = self.params["table"].data
        assert out.tokens.shape == (3, 5)
        for sym, row in zip(out.symbols, out.tokens.data):
            np.testing.assert_array_equal(row, table[sym])

    def test_gradient_is_count_matrix(self, rng):
        table = self.params["table"]
        table.grad = None
        out = coarse_encode(seg(rng.normal(size=(12, 1))), SaxConfig(4, 6, 5), self.params)
        backward(out.tokens.sum())
        counts = np.bincount(out.symbols, minlength=4)
        np.testing.assert_array_equal(table.grad, np.repeat(counts[:, None], 5, axis=1).astype(float))

    def test_gradient_check(self, rng):
        x = rng.normal(size=(12, 1))
        w = rng.normal(size=(3, 5))
        report = finite_diff_check(
            lambda: (dc.tanh(coarse_encode(seg(x), self.cfg, self.params).tokens) * w).sum(), [self.params["table"]]
        )
        assert report.passed
