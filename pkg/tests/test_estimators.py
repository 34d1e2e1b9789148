import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from fractalqos.lib.errors import DegenerateInputError, TraceError
from fractalqos.op.estimators import (
    DEFAULT_Q_GRID,
    EstimatorMethod,
    analytic_cascade_delta_h,
    analytic_cascade_hq,
    coefficient_of_variation,
    default_scales,
    estimate_generalized_hurst,
    hurst_exponent_h2,
    hurst_range,
    signature,
    window_signatures,
)
from fractalqos.op.traffic import GeneratorSpec, TrafficTrace, compose_traffic, generate_cascade, generate_fgn


def test_default_scales():
    assert default_scales(512) == [16, 32, 64, 128]
    assert default_scales(1 << 14) == [16, 32, 64, 128, 256, 512, 1024]


def test_constant_trace_is_degenerate():
    with pytest.raises(DegenerateInputError):
        estimate_generalized_hurst(TrafficTrace(np.full(1024, 3.0)))


def test_argument_checks():
    trace = TrafficTrace(np.random.default_rng(0).random(1024))
    with pytest.raises(TraceError):
        estimate_generalized_hurst(trace, q_grid=(0.0, 2.0))
    with pytest.raises(TraceError):
        estimate_generalized_hurst(trace, scales=[16, 32])
    with pytest.raises(TraceError):
        estimate_generalized_hurst(trace, scales=[16, 32, 64, 512])
    with pytest.raises(TraceError):
        signature(TrafficTrace(np.random.default_rng(0).random(256)))


def test_mostly_zero_trace_cannot_support_negative_moments():
    values = np.zeros(2048)
    values[::97] = 1.0
    with pytest.raises(DegenerateInputError):
        estimate_generalized_hurst(TrafficTrace(values), q_grid=(-5.0, 2.0))


def test_white_noise_has_hurst_near_half():
    values = 5.0 + np.random.default_rng(4).standard_normal(1 << 14)
    sig = signature(TrafficTrace(values))
    assert abs(sig.hurst_H - 0.5) < 0.08
    assert hurst_exponent_h2(TrafficTrace(values)) == pytest.approx(sig.hurst_H)
    assert sig.delta_h < 0.3


def test_signature_fields():
    trace = compose_traffic(GeneratorSpec(0.8, 4.0, 10, 0.7, length=4096, seed=2))
    sig = signature(trace)
    assert sig.intensity_lambda == pytest.approx(4.0)
    assert sig.sigma_var == pytest.approx(coefficient_of_variation(trace))
    assert sig.window_len == 4096
    assert sig.delta_h >= 0
    assert sig.hurst_H == sig.hq_samples[2.0]
    assert set(DEFAULT_Q_GRID) <= set(sig.hq_samples)
    record = sig.asRecord()
    assert record["hurst_H"] == sig.hurst_H
    assert "h(-5)" in record and "h(5)" in record


def test_cascade_is_more_multifractal_than_noise():
    cascade = signature(generate_cascade(12, 0.75, seed=1))
    noise = signature(TrafficTrace(1.0 + 0.1 * np.random.default_rng(1).standard_normal(1 << 12)))
    assert cascade.delta_h > noise.delta_h + 0.2


def test_hq_is_non_increasing_for_a_cascade():
    fit = estimate_generalized_hurst(generate_cascade(12, 0.7, seed=9))
    hq = [fit.h(q) for q in sorted(fit.q_grid)]
    assert hq[0] > hq[-1]
    assert hurst_range(fit) == pytest.approx(hq[0] - hq[-1])


def test_structure_method_agrees_on_white_noise():
    values = 2.0 + np.random.default_rng(6).standard_normal(1 << 13)
    fit = estimate_generalized_hurst(TrafficTrace(values), (2.0,), method=EstimatorMethod.Structure)
    assert abs(fit.h(2.0) - 0.5) < 0.1


def test_fit_rows_and_grid_lookup():
    fit = estimate_generalized_hurst(generate_cascade(11, 0.6, seed=3), (-2.0, 2.0))
    assert [row["q"] for row in fit.rows()] == [-2.0, 2.0]
    assert all(0 <= row["r_squared"] <= 1 for row in fit.rows())
    with pytest.raises(TraceError):
        fit.h(3.0)
    with pytest.raises(TraceError):
        hurst_range(fit)


def test_window_signatures_cover_complete_windows():
    trace = compose_traffic(GeneratorSpec(0.7, 2.0, length=2048 + 300, seed=1))
    sigs = window_signatures(trace, 1024)
    assert len(sigs) == 2
    assert all(s.window_len == 1024 for s in sigs)


def test_coefficient_of_variation():
    assert coefficient_of_variation(TrafficTrace(np.array([1.0, 3.0]))) == pytest.approx(0.5)
    with pytest.raises(TraceError):
        coefficient_of_variation(TrafficTrace(np.zeros(4)))


def test_analytic_cascade_exponents():
    # a uniform split is monofractal: tau(q) = q - 1, h(q) = 1
    assert analytic_cascade_hq(0.5, 3.0) == pytest.approx(1.0)
    assert analytic_cascade_delta_h(0.5) == pytest.approx(0.0, abs=1e-12)
    assert analytic_cascade_delta_h(0.7) > analytic_cascade_delta_h(0.6) > 0
    w = 0.7
    assert analytic_cascade_hq(w, 2.0) == pytest.approx((1 - math.log2(w ** 2 + (1 - w) ** 2)) / 2)


@pytest.mark.slow
@pytest.mark.parametrize("H", [0.6, 0.7, 0.8])
def test_recovers_hurst_of_fractional_gaussian_noise(H):
    fits = [estimate_generalized_hurst(generate_fgn(H, 2 ** 15, seed=seed)) for seed in range(20)]
    estimates = np.array([fit.h(2.0) for fit in fits])
    assert abs(estimates.mean() - H) <= 0.05
    assert np.all(np.abs(estimates - H) <= 0.1)
    # monofractal: h(q) barely depends on q
    assert np.mean([hurst_range(fit) for fit in fits]) <= 0.15


@pytest.mark.slow
def test_cascade_exponents_match_their_closed_form():
    fit = estimate_generalized_hurst(generate_cascade(14, 0.7, seed=2), q_grid=(-5.0, -2.0, 2.0, 5.0))
    for q in (-5.0, -2.0, 2.0, 5.0):
        assert fit.h(q) == pytest.approx(analytic_cascade_hq(0.7, q), rel=0.2)
    spreads = [signature(generate_cascade(14, w, seed=2)).delta_h for w in (0.7, 0.55, 0.51)]
    assert spreads[0] > spreads[1] > spreads[2]


@pytest.mark.slow
def test_delta_h_rises_with_sigma_var():
    spreads, variations = [], []
    for weight in (0.55, 0.65, 0.75, 0.85):
        for seed in range(10):
            trace = compose_traffic(GeneratorSpec(0.7, 2.0, cascade_depth=10, cascade_weight=weight,
                                                  length=4096, seed=seed))
            sig = signature(trace)
            spreads.append(sig.delta_h)
            variations.append(sig.sigma_var)
    correlation, _ = spearmanr(spreads, variations)
    assert correlation > 0.8
