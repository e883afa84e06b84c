"""Attention-score materialization, receptive fields, decay curves, export."""

import numpy as np
import pytest

from longssm import (
    FilterPolicy,
    SsmInputs,
    attention_scores,
    cumulative_decay_at_length,
    decay_curve,
    export_heatmap,
    receptive_field,
    selective_scan,
)
from longssm.attention import render_values
from longssm import attention_scores as ls_attention


def random_instance(rng, L, d_s, d_e):
    inputs = SsmInputs(
        x=rng.normal(size=(L, d_e)),
        delta=rng.uniform(0.02, 0.8, size=(L, d_e)),
        b=rng.normal(size=(L, d_s)),
        c=rng.normal(size=(L, d_s)),
    )
    a = -rng.uniform(0.05, 3.0, size=(d_s, d_e))
    return inputs, a


def geometric_instance(L=24, decay=0.5):
    """d_s = 1, constant C = 1, B_bar = 1, A_bar = decay: alpha = decay**(i-j)."""
    step = 0.25
    delta = np.full((L, 1), step)
    a = np.array([[np.log(decay) / step]])
    b = np.full((L, 1), 1.0 / step)
    inputs = SsmInputs(x=np.ones((L, 1)), delta=delta, b=b, c=np.ones((L, 1)))
    return inputs, a


def brute_alpha(inputs, a, ch, i, j):
    """Direct evaluation of one attention score via explicit products."""
    a_bars = np.exp(inputs.delta[:, ch][:, None] * a[:, ch][None, :])  # (L, d_s)
    prod = np.multiply.reduce(a_bars[j + 1 : i + 1], axis=0) if j < i else np.ones(a.shape[0])
    b_bar = inputs.delta[j, ch] * inputs.b[j]
    return float(np.sum(inputs.c[i] * prod * b_bar))


class TestAttentionScores:
    def test_diagonal_is_gated_write(self):
        rng = np.random.default_rng(0)
        inputs, a = random_instance(rng, 10, 3, 4)
        for sl in attention_scores(inputs, a):
            for i in range(10):
                expected = np.sum(inputs.c[i] * inputs.delta[i, sl.channel] * inputs.b[i])
                assert sl.alpha[i, i] == pytest.approx(expected, rel=1e-12)

    def test_geometric_form(self):
        inputs, a = geometric_instance(L=16, decay=0.5)
        sl = attention_scores(inputs, a, channels=[0])[0]
        i, j = np.tril_indices(16)
        np.testing.assert_allclose(sl.alpha[i, j], 0.5 ** (i - j), rtol=1e-12)

    def test_causality(self):
        rng = np.random.default_rng(1)
        inputs, a = random_instance(rng, 12, 2, 3)
        for sl in attention_scores(inputs, a):
            i, j = np.triu_indices(12, k=1)
            assert np.all(sl.alpha[i, j] == 0)

    @pytest.mark.parametrize("seed", range(4))
    def test_reconstructs_scan_output(self, seed):
        rng = np.random.default_rng(seed)
        inputs, a = random_instance(rng, 32, 3, 5)
        y, _ = selective_scan(inputs, a)
        for sl in attention_scores(inputs, a):
            recon = sl.alpha @ inputs.x[:, sl.channel]
            np.testing.assert_allclose(recon, y[:, sl.channel], rtol=1e-8, atol=1e-12)

    def test_matches_brute_force_cells(self):
        rng = np.random.default_rng(5)
        inputs, a = random_instance(rng, 20, 2, 3)
        sl = attention_scores(inputs, a, channels=[1])[0]
        for i, j in [(0, 0), (7, 3), (19, 0), (19, 18), (12, 12)]:
            assert sl.alpha[i, j] == pytest.approx(brute_alpha(inputs, a, 1, i, j), rel=1e-10)

    def test_row_range_and_memory_shape(self):
        rng = np.random.default_rng(2)
        inputs, a = random_instance(rng, 30, 2, 3)
        sl = attention_scores(inputs, a, channels=[0], row_range=(25, 30))[0]
        assert sl.alpha.shape == (5, 30)
        assert list(sl.rows) == [25, 26, 27, 28, 29]
        full = attention_scores(inputs, a, channels=[0])[0]
        np.testing.assert_array_equal(sl.alpha, full.alpha[25:30])

    def test_out_of_range_selectors(self):
        rng = np.random.default_rng(3)
        inputs, a = random_instance(rng, 8, 2, 3)
        with pytest.raises(IndexError):
            attention_scores(inputs, a, channels=[3])
        with pytest.raises(IndexError):
            attention_scores(inputs, a, row_range=(4, 9))

    def test_thread_cap_env_var_leaves_results_unchanged(self, monkeypatch):
        rng = np.random.default_rng(14)
        inputs, a = random_instance(rng, 16, 2, 4)
        serial = ls_attention(inputs, a)
        monkeypatch.setenv("LONGCTX_THREADS", "4")
        threaded = ls_attention(inputs, a)
        for s0, s1 in zip(serial, threaded):
            np.testing.assert_array_equal(s0.alpha, s1.alpha)

    def test_filtered_scores_match_filtered_scan(self):
        rng = np.random.default_rng(4)
        inputs, a = random_instance(rng, 24, 2, 4)
        mask = np.array([True, True, False, False])
        thresholds = np.where(mask, np.median(inputs.delta), 0.0)
        policy = FilterPolicy(global_mask=mask, thresholds=thresholds)
        from longssm import filtered_scan

        y, _ = filtered_scan(inputs, a, policy=policy)
        for sl in attention_scores(inputs, a, policy=policy):
            recon = sl.alpha @ inputs.x[:, sl.channel]
            np.testing.assert_allclose(recon, y[:, sl.channel], rtol=1e-8, atol=1e-12)


class TestReceptiveField:
    def test_geometric_closed_form(self):
        # 0.5**9 ~ 1.95e-3 > 1e-3 >= 0.5**10: span saturates at 10
        inputs, a = geometric_instance(L=16, decay=0.5)
        sl = attention_scores(inputs, a, channels=[0])[0]
        prof = receptive_field(sl, epsilon=1e-3)
        expected = np.minimum(np.arange(16) + 1, 10)
        np.testing.assert_array_equal(prof.span, expected)

    def test_all_zero_slice(self):
        rng = np.random.default_rng(6)
        inputs, a = random_instance(rng, 6, 2, 3)
        zeroed = SsmInputs(x=inputs.x, delta=inputs.delta, b=np.zeros_like(inputs.b), c=inputs.c)
        sl = attention_scores(zeroed, a, channels=[0])[0]
        assert np.all(receptive_field(sl).span == 0)

    def test_epsilon_above_max(self):
        rng = np.random.default_rng(7)
        inputs, a = random_instance(rng, 6, 2, 3)
        sl = attention_scores(inputs, a, channels=[0])[0]
        prof = receptive_field(sl, epsilon=np.abs(sl.alpha).max() * 2)
        assert np.all(prof.span == 0)

    def test_rejects_nonpositive_epsilon(self):
        rng = np.random.default_rng(8)
        inputs, a = random_instance(rng, 4, 2, 3)
        sl = attention_scores(inputs, a, channels=[0])[0]
        with pytest.raises(ValueError):
            receptive_field(sl, epsilon=0.0)

    def test_span_bounded_by_position(self):
        rng = np.random.default_rng(9)
        inputs, a = random_instance(rng, 20, 2, 4)
        for sl in attention_scores(inputs, a):
            prof = receptive_field(sl)
            assert np.all(prof.span >= 0)
            assert np.all(prof.span <= prof.rows + 1)


class TestDecayCurve:
    def test_single_step_closed_form(self):
        delta = np.array([[np.log(2.0)]])
        a = np.array([[-1.0]])
        curve = decay_curve(delta, a, 0)
        assert curve.values[0] == pytest.approx(0.5, rel=1e-12)

    def test_matches_stepwise_product(self):
        rng = np.random.default_rng(10)
        L, d_s, d_e = 64, 3, 4
        delta = rng.uniform(0.05, 0.6, size=(L, d_e))
        a = -rng.uniform(0.05, 2.0, size=(d_s, d_e))
        for ch in range(d_e):
            a_bars = np.exp(delta[:, ch][:, None] * a[:, ch][None, :])  # (L, d_s)
            stepwise = np.cumprod(a_bars, axis=0).mean(axis=1)
            curve = decay_curve(delta, a, ch)
            np.testing.assert_allclose(curve.values, stepwise, rtol=1e-9)

    def test_monotone_nonincreasing_and_in_unit_interval(self):
        rng = np.random.default_rng(11)
        delta = rng.uniform(0.01, 1.0, size=(40, 3))
        a = -rng.uniform(0.01, 4.0, size=(2, 3))
        for ch in range(3):
            curve = decay_curve(delta, a, ch)
            assert np.all(np.diff(curve.values) <= 0)
            assert np.all(curve.values > 0) and np.all(curve.values <= 1)

    def test_underflow_reports_zero_with_log_retained(self):
        delta = np.full((50, 1), 20.0)
        a = np.array([[-1.0]])
        curve = decay_curve(delta, a, 0)
        assert curve.values[-1] == 0.0
        assert curve.log_values[-1] == pytest.approx(-20.0 * 50, rel=1e-12)

    def test_final_point_equals_classifier_statistic(self):
        rng = np.random.default_rng(12)
        delta = rng.uniform(0.05, 0.5, size=(32, 4))
        a = -rng.uniform(0.1, 2.0, size=(3, 4))
        decay = cumulative_decay_at_length(delta, a)
        for ch in range(4):
            assert decay_curve(delta, a, ch).values[-1] == decay[ch]


class TestExport:
    def test_two_by_two_has_three_cells(self, tmp_path):
        sl = _small_slice()
        path = tmp_path / "map.csv"
        export_heatmap(sl, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "i,j,alpha"
        assert len(lines) == 1 + 3

    def test_reexport_identical_bytes(self, tmp_path):
        sl = _small_slice()
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        export_heatmap(sl, p1, svg=True)
        export_heatmap(sl, p2, svg=True)
        assert p1.read_bytes() == p2.read_bytes()
        assert p1.with_suffix(".svg").read_bytes() == p2.with_suffix(".svg").read_bytes()

    def test_log_scale_rendered_value(self):
        alpha = np.array([[1e-3, 0.0], [1e-1, 1.0]])
        sl = _slice_from(alpha)
        vals = render_values(sl, "log")
        assert vals[0, 0] == pytest.approx(-3.0, abs=1e-12)
        assert vals[1, 1] == pytest.approx(0.0, abs=1e-12)

    def test_linear_scale_is_raw(self):
        alpha = np.array([[0.25, 0.0], [0.5, -0.75]])
        sl = _slice_from(alpha)
        np.testing.assert_array_equal(render_values(sl, "linear"), alpha)

    def test_csv_round_trips_values(self, tmp_path):
        rng = np.random.default_rng(13)
        inputs, a = random_instance(rng, 6, 2, 3)
        sl = attention_scores(inputs, a, channels=[1])[0]
        path = tmp_path / "map.csv"
        export_heatmap(sl, path)
        for line in path.read_text().strip().splitlines()[1:]:
            i, j, val = line.split(",")
            assert float(val) == sl.alpha[int(i), int(j)]


def _slice_from(alpha):
    from longssm import AttentionSlice

    alpha = np.tril(alpha)
    return AttentionSlice(
        channel=0, layer=0, alpha=alpha, rows=np.arange(alpha.shape[0]), seq_len=alpha.shape[1]
    )


def _small_slice():
    return _slice_from(np.array([[1.0, 0.0], [0.5, 0.25]]))
