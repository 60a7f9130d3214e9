import math

import numpy as np
import pytest

from instedit.errors import DataError
from instedit.ipr import (
    CrossAttentionMap,
    FeatureMask,
    IprConfig,
    TokenLayout,
    apply_ipr,
    compute_lambda_s,
    ipr_active,
    redistribute_row_inside,
    redistribute_row_outside,
    warmup_value,
)

LAYOUT_5 = TokenLayout(n_ctx=5, n_text=2)  # S, T1, T2, E, P


def random_layout(rng) -> TokenLayout:
    n_ctx = int(rng.integers(4, 17))
    n_text = int(rng.integers(1, n_ctx - 1))
    return TokenLayout(n_ctx=n_ctx, n_text=n_text)


def random_map(rng, layout, h, w) -> CrossAttentionMap:
    values = rng.dirichlet(np.ones(layout.n_ctx), size=h * w)
    return CrossAttentionMap(values, (h, w))


class TestTypes:
    def test_layout_partition(self):
        lay = TokenLayout(n_ctx=8, n_text=3)
        cols = {lay.index_S} | set(lay.indices_T) | {lay.index_E} | set(lay.indices_P)
        assert cols == set(range(8))
        assert lay.index_S == 0 and lay.index_E == 4

    def test_layout_too_small(self):
        with pytest.raises(DataError):
            TokenLayout(n_ctx=3, n_text=2)

    def test_map_validates_rows(self):
        with pytest.raises(DataError):
            CrossAttentionMap(np.array([[0.5, 0.4]]), (1, 1))  # sums to 0.9
        with pytest.raises(DataError):
            CrossAttentionMap(np.array([[1.2, -0.2]]), (1, 1))
        with pytest.raises(DataError):
            CrossAttentionMap(np.ones((3, 2)) / 2.0, (2, 2))  # row count mismatch

    def test_mask_length_checked(self):
        with pytest.raises(DataError):
            FeatureMask(np.ones(5, dtype=bool), (2, 2))


class TestWarmup:
    def test_step_zero_is_lambda(self):
        assert warmup_value(0, 50, IprConfig()) == 0.5

    def test_outside_window_is_zero(self):
        cfg = IprConfig()
        for step in (5, 6, 20, 49):
            assert warmup_value(step, 50, cfg) == 0.0

    def test_hand_decay(self):
        assert warmup_value(2, 50, IprConfig()) == pytest.approx(0.3, abs=1e-12)

    def test_zero_fraction_window(self):
        assert warmup_value(0, 50, IprConfig(warmup_fraction=0.0)) == 0.0

    def test_bad_step_rejected(self):
        with pytest.raises(DataError):
            warmup_value(50, 50, IprConfig())


class TestLambdaS:
    def test_hand_examples(self):
        assert compute_lambda_s([0.6, 0.5, 0.7], 1000, 1000, 0.0) == pytest.approx(0.5, abs=1e-12)
        assert compute_lambda_s([0.9, 0.1], 0, 1000, 0.3) == 0.0
        assert compute_lambda_s([0.4], 500, 1000, 0.1) == pytest.approx(0.25, abs=1e-12)

    def test_empty_region_is_zero(self):
        assert compute_lambda_s([], 800, 1000, 0.5) == 0.0

    def test_oracle_and_min_mean_equivalence(self, rng):
        # independent 64-bit evaluation of the decay rule, both written forms
        for _ in range(1000):
            a = rng.uniform(0.0, 1.0, size=int(rng.integers(1, 21)))
            t = int(rng.integers(0, 1001))
            w = float(rng.uniform(0.0, 1.0))
            got = compute_lambda_s(a, t, 1000, w)
            vals = [float(v) for v in a]
            mean = math.fsum(vals) / len(vals)
            ref_full = (t / 1000) * (min(mean, min(vals)) + w)
            ref_simple = (t / 1000) * (min(vals) + w)
            assert abs(got - ref_full) <= 1e-12
            assert abs(got - ref_simple) <= 1e-12


class TestRowRules:
    def test_outside_hand_example(self):
        row = np.array([0.5, 0.2, 0.1, 0.1, 0.1])
        out = redistribute_row_outside(row, LAYOUT_5)
        assert np.allclose(out, [0.9, 0, 0, 0, 0.1], atol=1e-15)
        assert out[1] == 0.0 and out[2] == 0.0 and out[3] == 0.0

    def test_outside_no_mass_to_move(self):
        row = np.array([0.9, 0.0, 0.0, 0.0, 0.1])
        assert np.array_equal(redistribute_row_outside(row, LAYOUT_5), row)

    def test_outside_all_padding(self):
        lay = TokenLayout(n_ctx=4, n_text=1)
        row = np.array([0.0, 0.0, 0.0, 1.0])
        assert np.array_equal(redistribute_row_outside(row, lay), row)

    def test_outside_idempotent(self, rng):
        for _ in range(50):
            row = rng.dirichlet(np.ones(5))
            once = redistribute_row_outside(row, LAYOUT_5)
            twice = redistribute_row_outside(once, LAYOUT_5)
            assert np.array_equal(once, twice)

    def test_inside_hand_example(self):
        row = np.array([0.5, 0.2, 0.1, 0.1, 0.1])
        out = redistribute_row_inside(row, LAYOUT_5, 0.2, 0.5)
        assert np.allclose(out, [0.3, 0.25, 0.15, 0.2, 0.1], atol=1e-15)

    def test_inside_zero_lambda_unchanged(self):
        row = np.array([0.5, 0.2, 0.1, 0.1, 0.1])
        assert np.array_equal(redistribute_row_inside(row, LAYOUT_5, 0.0, 0.5), row)

    def test_inside_clamps_at_s(self):
        row = np.array([0.05, 0.2, 0.25, 0.1, 0.4])
        out = redistribute_row_inside(row, LAYOUT_5, 0.2, 0.5)
        assert out[0] == 0.0
        # the clamped 0.05 is what actually moves
        assert out[1] == pytest.approx(0.2 + 0.05 * 0.5 / 2, abs=1e-15)
        assert out[3] == pytest.approx(0.1 + 0.05 * 0.5, abs=1e-15)
        assert abs(out.sum() - row.sum()) < 1e-12

    def test_inside_needs_text_tokens(self):
        lay = TokenLayout(n_ctx=4, n_text=0)
        with pytest.raises(DataError):
            redistribute_row_inside(np.array([0.5, 0.3, 0.1, 0.1]), lay, 0.1, 0.5)


class TestApplyIpr:
    CFG = IprConfig()

    def test_inactive_returns_input_unchanged(self, rng):
        amap = random_map(rng, LAYOUT_5, 2, 2)
        mask = FeatureMask(rng.integers(0, 2, 4).astype(bool), (2, 2))
        out = apply_ipr(amap, mask, LAYOUT_5, self.CFG, 5, 50, 800, 1000)
        assert out is amap

    def test_all_zero_mask_confines_everywhere(self, rng):
        amap = random_map(rng, LAYOUT_5, 3, 2)
        mask = FeatureMask(np.zeros(6, dtype=bool), (3, 2))
        out = apply_ipr(amap, mask, LAYOUT_5, self.CFG, 0, 50, 800, 1000)
        te = list(LAYOUT_5.indices_T) + [LAYOUT_5.index_E]
        assert np.all(out.values[:, te] == 0.0)

    def test_all_one_mask_reduces_s_everywhere(self, rng):
        amap = random_map(rng, LAYOUT_5, 3, 2)
        mask = FeatureMask(np.ones(6, dtype=bool), (3, 2))
        seen = []
        out = apply_ipr(amap, mask, LAYOUT_5, self.CFG, 0, 50, 800, 1000, on_lambda=seen.append)
        assert len(seen) == 1 and seen[0] > 0
        assert np.all(out.values[:, 0] <= amap.values[:, 0])
        assert np.all(amap.values[:, 0] - out.values[:, 0] <= seen[0] + 1e-15)

    def test_matches_row_by_row_composition(self, rng):
        # the vectorized kernel must agree with the scalar row rules
        for _ in range(50):
            layout = random_layout(rng)
            h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            amap = random_map(rng, layout, h, w)
            bits = rng.integers(0, 2, h * w).astype(bool)
            mask = FeatureMask(bits, (h, w))
            t = int(rng.integers(0, 1001))
            out = apply_ipr(amap, mask, layout, self.CFG, 0, 50, t, 1000)

            w_val = warmup_value(0, 50, self.CFG)
            lam_s = compute_lambda_s(amap.values[bits, layout.index_S], t, 1000, w_val)
            expected = np.stack(
                [
                    redistribute_row_inside(row, layout, lam_s, self.CFG.lambda_r)
                    if bit
                    else redistribute_row_outside(row, layout)
                    for row, bit in zip(amap.values, bits)
                ]
            )
            assert np.allclose(out.values, expected, atol=1e-15)

    def test_monotone_faithfulness_gain(self, rng):
        # inside rows with S >= lambda_S gain exactly lambda_S * lambda_r of
        # T mass; clamped rows move their whole S entry instead
        layout = TokenLayout(n_ctx=8, n_text=4)
        amap = random_map(rng, layout, 3, 3)
        mask = FeatureMask(np.ones(9, dtype=bool), (3, 3))
        seen = []
        out = apply_ipr(amap, mask, layout, self.CFG, 0, 50, 900, 1000, on_lambda=seen.append)
        lam_s = seen[0]
        t_cols = list(layout.indices_T)
        gain = out.values[:, t_cols].sum(axis=1) - amap.values[:, t_cols].sum(axis=1)
        s_col = amap.values[:, layout.index_S]
        expected = np.minimum(lam_s, s_col) * self.CFG.lambda_r
        assert np.abs(gain - expected).max() < 1e-12
        unclamped = s_col >= lam_s
        if unclamped.any():
            assert np.abs(gain[unclamped] - lam_s * self.CFG.lambda_r).max() < 1e-12

    def test_mask_grid_mismatch_rejected(self, rng):
        amap = random_map(rng, LAYOUT_5, 2, 2)
        mask = FeatureMask(np.zeros(6, dtype=bool), (3, 2))
        with pytest.raises(DataError):
            apply_ipr(amap, mask, LAYOUT_5, self.CFG, 0, 50, 800, 1000)

    def test_window_boundary_is_exact_at_defaults(self):
        cfg = IprConfig()
        assert ipr_active(cfg, 4, 50)
        assert not ipr_active(cfg, 5, 50)
        # fractions with float noise must not widen the window
        assert not ipr_active(IprConfig(ipr_fraction=0.1), 3, 30)

    def test_randomized_conservation_suite(self, rng):
        # the randomized invariants: row sums, padding, confinement, positivity
        for _ in range(300):
            layout = random_layout(rng)
            h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            amap = random_map(rng, layout, h, w)
            bits = rng.integers(0, 2, h * w).astype(bool)
            mask = FeatureMask(bits, (h, w))
            cfg = IprConfig(
                lambda_=float(rng.uniform(0, 1)),
                lambda_r=float(rng.uniform(0, 1)),
                warmup_fraction=float(rng.uniform(0, 1)),
                ipr_fraction=float(rng.uniform(0, 1)),
            )
            total = int(rng.integers(1, 61))
            step = int(rng.integers(0, total))
            t = int(rng.integers(0, 1001))
            out = apply_ipr(amap, mask, layout, cfg, step, total, t, 1000)
            if not ipr_active(cfg, step, total):
                assert out is amap
                continue
            assert np.abs(out.values.sum(axis=1) - 1.0).max() < 1e-6
            assert np.all(out.values >= 0.0)
            p_cols = list(layout.indices_P)
            assert np.array_equal(out.values[:, p_cols], amap.values[:, p_cols])
            te = list(layout.indices_T) + [layout.index_E]
            assert np.all(out.values[np.ix_(~bits, te)] == 0.0)
