from fractions import Fraction

import numpy as np
import pytest

from hetmoe.layer import LayerConfig
from hetmoe.simulator import (
    MEASURED_THROUGHPUT_GAINS,
    CostModel,
    Placement,
    PlanView,
    complexity_ratio,
    predicted_speedup,
    ratio_for,
    simulate,
    tau_sweep,
)

TAU_GRID = [0.1, 0.25, 0.5, 0.75, 1.0]
PUBLISHED_MIXES = [(8, 4), (16, 4), (32, 8), (16, 4)]


def exact_ratio(n_ffn, n_zc, tau) -> Fraction:
    t = Fraction(str(tau))
    return t * n_ffn / (t * n_ffn + n_zc)


class TestComplexityRatio:
    def test_worked_example(self):
        assert ratio_for(16, 4, 0.75) == 0.75
        assert ratio_for(8, 4, 0.75) == 0.6
        cfg = LayerConfig(n_ffn=16, n_zero=1, n_copy=1, n_const=2, tau=0.75)
        assert complexity_ratio(cfg) == 0.75

    def test_vanilla_reduction_is_exactly_one(self):
        assert ratio_for(8, 0, 1.0) == 1.0
        assert ratio_for(8, 0, 0.3) == 1.0

    def test_small_tau_limit(self):
        assert ratio_for(8, 4, 1e-9) < 1e-8

    def test_exact_rational_agreement_on_published_grid(self):
        for n_ffn, n_zc in PUBLISHED_MIXES:
            for tau in TAU_GRID:
                got = ratio_for(n_ffn, n_zc, tau)
                want = exact_ratio(n_ffn, n_zc, tau)
                assert abs(got - float(want)) < 1e-15
        assert ratio_for(16, 4, 1.0) == 0.8  # exactly representable

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            ratio_for(0, 4, 0.5)
        with pytest.raises(ValueError):
            ratio_for(8, 4, 0.0)


class TestPredictedSpeedup:
    def test_strictly_decreasing_in_tau(self):
        speedups = [predicted_speedup(8, 4, t) for t in TAU_GRID]
        assert all(a > b for a, b in zip(speedups, speedups[1:]))

    def test_strictly_increasing_in_n_zc(self):
        speedups = [predicted_speedup(8, z, 0.75) for z in (1, 2, 4, 8)]
        assert all(a < b for a, b in zip(speedups, speedups[1:]))

    def test_dominates_every_measured_gain(self):
        # the analytical bound ignores overheads, so it must sit above all
        # measured throughput increases for the published shape family
        assert len(MEASURED_THROUGHPUT_GAINS) == 16
        for name, n_ffn, n_zc, tau, measured in MEASURED_THROUGHPUT_GAINS:
            assert predicted_speedup(n_ffn, n_zc, tau) >= measured, (name, tau)

    def test_anchor_rows(self):
        assert predicted_speedup(16, 4, 1.0) == pytest.approx(0.25)
        assert predicted_speedup(8, 4, 0.1) == pytest.approx(5.0)


class TestTauSweep:
    def test_one_row_per_tau_and_monotone(self):
        rows = tau_sweep(8, 4, TAU_GRID)
        assert len(rows) == len(TAU_GRID)
        ratios = [r for _, r, _ in rows]
        assert all(a < b for a, b in zip(ratios, ratios[1:]))


def balanced_plan(n_tokens, n_experts, k, seed=0):
    rng = np.random.default_rng(seed)
    selected = np.stack([rng.choice(n_experts, size=k, replace=False)
                         for _ in range(n_tokens)]).astype(np.int64)
    return PlanView(selected=selected, kept=np.ones_like(selected, dtype=bool))


class TestSimulate:
    def _cfg(self, n_ffn=4, n_zero=2, n_copy=1, n_const=1, tau=1.0):
        return LayerConfig(n_ffn=n_ffn, n_zero=n_zero, n_copy=n_copy, n_const=n_const,
                           k=2, tau=tau, residuals_enabled=False)

    def test_balanced_trace_matches_formula(self):
        # tau=1 with as many zero-computation experts as FFN experts: ratio 1/2
        cfg = self._cfg()
        plan = balanced_plan(4000, 8, 2, seed=1)
        report = simulate([plan], cfg, Placement.balanced(4, 2), CostModel.from_shape(16, 32))
        assert report.formula_ratio == 0.5
        assert abs(report.selected_ffn_fraction - 0.5) < 0.02
        assert report.kept_ffn_fraction == report.selected_ffn_fraction

    def test_exactly_balanced_trace_equals_formula(self):
        # enforced balance: every token pairs one FFN with one replicated
        # expert, so the empirical share equals the formula value exactly
        cfg = self._cfg()
        selected = np.stack([
            np.arange(400) % 4,          # FFN experts 0..3
            4 + (np.arange(400) % 4),    # zero-computation experts 4..7
        ], axis=1).astype(np.int64)
        plan = PlanView(selected=selected, kept=np.ones_like(selected, dtype=bool))
        report = simulate([plan], cfg, Placement.balanced(4, 2), CostModel.from_shape(16, 32))
        assert report.selected_ffn_fraction == report.formula_ratio == 0.5
        assert 0.0 <= report.selected_ffn_fraction <= 1.0

    def test_single_device_has_no_communication(self):
        cfg = self._cfg()
        report = simulate([balanced_plan(500, 8, 2, seed=2)], cfg,
                          Placement.balanced(4, 1), CostModel.from_shape(16, 32))
        assert report.remote_ffn_tokens == 0
        assert report.comm_bytes == 0

    def test_zero_computation_experts_never_cross_devices(self):
        # every selection hits a replicated expert: zero communication
        cfg = self._cfg()
        rng = np.random.default_rng(3)
        selected = rng.integers(4, 8, size=(300, 2)).astype(np.int64)
        plan = PlanView(selected=selected, kept=np.ones_like(selected, dtype=bool))
        report = simulate([plan], cfg, Placement.balanced(4, 4), CostModel.from_shape(16, 32))
        assert report.comm_bytes == 0
        assert report.selected_ffn_fraction == 0.0
        assert report.ffn_flops == 0

    def test_flops_and_const_accounting(self):
        cfg = self._cfg()
        selected = np.array([[0, 7], [1, 7]], dtype=np.int64)  # expert 7 is constant
        plan = PlanView(selected=selected, kept=np.ones_like(selected, dtype=bool))
        cm = CostModel.from_shape(16, 32)
        report = simulate([plan], cfg, Placement.balanced(4, 2), cm)
        assert report.ffn_flops == 2 * cm.flops_per_ffn_token
        assert report.const_flops == 2 * cm.flops_per_const_token

    def test_const_flops_negligible_at_published_shapes(self):
        for dim, inter in ((768, 2048), (1536, 4096)):
            cm = CostModel.from_shape(dim, inter)
            assert cm.flops_per_const_token < 0.01 * cm.flops_per_ffn_token

    def test_dropped_pairs_excluded_from_kept_fraction(self):
        cfg = self._cfg()
        selected = np.array([[0, 4], [1, 4]], dtype=np.int64)
        kept = np.array([[True, True], [False, True]])
        report = simulate([PlanView(selected, kept)], cfg,
                          Placement.balanced(4, 2), CostModel.from_shape(16, 32))
        assert report.selected_ffn_fraction == 0.5
        assert report.kept_ffn_fraction == 0.25
        assert report.kept_pairs == 3

    def test_per_device_load_and_remote_counting(self):
        cfg = self._cfg(n_ffn=2, n_zero=1, n_copy=1, n_const=0)
        # tokens alternate devices (t % 2); expert 0 on device 0, expert 1 on device 1
        selected = np.array([[0, 2], [0, 2], [1, 2], [1, 2]], dtype=np.int64)
        plan = PlanView(selected=selected, kept=np.ones_like(selected, dtype=bool))
        report = simulate([plan], cfg, Placement.balanced(2, 2), CostModel.from_shape(8, 16))
        # tokens 0,2 are on device 0; tokens 1,3 on device 1
        # pairs: t0->e0 local, t1->e0 remote, t2->e1 remote, t3->e1 local
        assert report.per_device_tokens.tolist() == [2, 2]
        assert report.remote_ffn_tokens == 2
        assert report.comm_bytes == 2 * 8 * 8
        assert report.max_over_mean_load == 1.0

    def test_trace_config_mismatch(self):
        cfg = self._cfg(n_ffn=2, n_zero=1, n_copy=0, n_const=0)
        selected = np.array([[5, 1]], dtype=np.int64)  # expert 5 does not exist
        with pytest.raises(ValueError):
            simulate([PlanView(selected, np.ones_like(selected, dtype=bool))], cfg,
                     Placement.balanced(2, 1), CostModel.from_shape(8, 16))

    def test_empty_traces_rejected(self):
        with pytest.raises(ValueError):
            simulate([], self._cfg(), Placement.balanced(4, 1), CostModel.from_shape(8, 16))

    def test_report_text_carries_conventions(self):
        cfg = self._cfg()
        report = simulate([balanced_plan(100, 8, 2, seed=4)], cfg,
                          Placement.balanced(4, 2), CostModel.from_shape(16, 32))
        text = report.to_text()
        assert "flops per multiply-accumulate" in text
        assert "formula ffn ratio" in text


def test_placement_balanced_round_robin():
    p = Placement.balanced(10, 4)
    assert p.ffn_device.tolist() == [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]
    with pytest.raises(ValueError):
        Placement.balanced(4, 0)
