#!/usr/bin/env python3
"""
Tests for the MGF estimator, layer / chain / marginal / output rates and the empirical-rate harness
Run with: pytest script/test_ldp.py
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import numpy as np
import pytest
from scipy.stats import chi2

from cnnldp.arch import Activation, ActivationKind, ArchSpec, ExtractorKind, LayerSpec
from cnnldp.errors import ShapeMismatchError
from cnnldp.experiments import pattern_inputs, preset
from cnnldp.gauss import PsdMatrix, RngStream
from cnnldp.kernel import InputBatch, input_kernel, limit_chain, limit_kernel_mc
from cnnldp.ldp import (EventSpec, RateOptions, chi_square_tail_rate, empirical_rate, log_mgf, output_rate,
                        output_rate_infimum, rate_chain, rate_layer, rate_marginal, safe_tilt_radius,
                        scalar_chi_square_rate)


def fcnn(kind=ActivationKind.IDENTITY, hidden_layers=1, slopes=None):
    return ArchSpec(
        hidden_layers=hidden_layers, spatial_dims=[1] * (hidden_layers + 2),
        slopes=slopes or [1.0] * hidden_layers,
        layers=[LayerSpec(extractor=ExtractorKind.FULLY_CONNECTED) for _ in range(hidden_layers + 1)],
        activation=Activation(kind=kind),
    )


def analytic_layer_rate(layer, q_next, q_prev):
    """Scalar identity network with lambda = 1"""
    return scalar_chi_square_rate(float(np.asarray(q_next)[0, 0]) / float(np.asarray(q_prev)[0, 0]))


def test_zero_tilt_is_exactly_zero():
    est = log_mgf(fcnn(), 1, [[0.0]], [[1.0]], 1000, RngStream(1))
    assert est.log_value == 0.0
    assert not est.infinite


def test_scalar_log_mgf():
    est = log_mgf(fcnn(), 1, [[0.25]], [[1.0]], 100_000, RngStream(2))
    assert not est.infinite
    assert est.log_value == pytest.approx(-0.5 * math.log(0.5), abs=max(3 * est.stderr, 0.02))


def test_negative_tilt_log_mgf():
    est = log_mgf(fcnn(), 1, [[-1.0]], [[1.0]], 100_000, RngStream(2))
    assert est.log_value == pytest.approx(-0.5 * math.log(3.0), abs=max(3 * est.stderr, 0.01))


def test_divergent_tilt_is_flagged():
    est = log_mgf(fcnn(), 1, [[0.6]], [[1.0]], 100_000, RngStream(3))
    assert est.infinite
    assert est.log_value == math.inf


def test_heavy_but_finite_tilt_is_not_flagged():
    # exp(0.4 z^2) has tail index 1.25
    est = log_mgf(fcnn(), 1, [[0.4]], [[1.0]], 100_000, RngStream(3))
    assert not est.infinite
    assert est.log_value == pytest.approx(-0.5 * math.log(0.2), abs=0.3)


def test_trust_region_grows_past_a_divergent_radius():
    # the optimal tilt 11/24 lies beyond 0.39, where a first x1.3 step diverges
    result = rate_layer(fcnn(), 1, [[12.0]], [[1.0]], RateOptions(), RngStream(6, ("wide",)))
    assert result.radius > 0.39 * (1 + 1e-3)
    assert 3.97 < result.value < scalar_chi_square_rate(12.0) * 1.05


def test_log_mgf_rejects_wrong_tilt_shape():
    with pytest.raises(ShapeMismatchError):
        log_mgf(fcnn(), 1, np.eye(2), [[1.0]], 10, RngStream(1))


def test_safe_radius_scalar():
    r = safe_tilt_radius(fcnn(), 1, [[1.0]], 20_000, RngStream(4))
    assert r == pytest.approx(1 / (2 * 1.5), rel=1e-3)


def test_safe_radius_scales_with_q1():
    r1 = safe_tilt_radius(fcnn(), 1, [[1.0]], 20_000, RngStream(4))
    r4 = safe_tilt_radius(fcnn(), 1, [[4.0]], 20_000, RngStream(4))
    assert r4 == pytest.approx(r1 / 4, rel=1e-12)


def test_safe_radius_bounded_activation():
    r = safe_tilt_radius(fcnn(ActivationKind.TANH), 1, [[1.0]], 20_000, RngStream(4))
    assert 0 < r < math.inf


def test_safe_radius_degenerate():
    assert safe_tilt_radius(fcnn(), 1, [[0.0]], 1000, RngStream(4)) == math.inf


@pytest.mark.parametrize("q,tol", [(1.5, 0.005), (0.5, 0.005)])
def test_scalar_rate_examples(q, tol):
    result = rate_layer(fcnn(), 1, [[q]], [[1.0]], RateOptions(), RngStream(5, ("rate",)))
    assert result.value == pytest.approx(scalar_chi_square_rate(q), abs=tol)
    assert result.converged
    assert not result.domain_limited


@pytest.mark.parametrize("q", [0.25, 0.5, 1.5, 2.0, 4.0])
def test_scalar_rate_oracle(q):
    exact = scalar_chi_square_rate(q)
    result = rate_layer(fcnn(), 1, [[q]], [[1.0]], RateOptions(), RngStream(6, ("oracle", str(q))))
    assert abs(result.value - exact) <= 0.02 * max(1.0, exact)
    assert result.value >= 0.0
    # optimal tilt is (1 - 1/q) / 2
    assert result.tilt_matrix()[0, 0] == pytest.approx(0.5 * (1 - 1 / q), abs=0.05 * max(1.0, 1 / q))


def test_rate_vanishes_at_mean():
    spec = preset("circular1d-relu").arch
    k1 = input_kernel(spec, InputBatch(pattern_inputs(spec)))
    mean = limit_kernel_mc(spec, 1, k1, 1_000_000, RngStream(7)).kernel
    result = rate_layer(spec, 1, mean, k1, RateOptions(), RngStream(8))
    assert 0.0 <= result.value <= 2e-3
    assert np.linalg.norm(result.tilt_matrix()) <= result.radius * (1 + 1e-9)


def test_rate_layer_rejects_bad_shapes():
    with pytest.raises(ShapeMismatchError):
        rate_layer(fcnn(), 1, np.eye(2), [[1.0]], RateOptions(samples=100), RngStream(1))


def test_rate_chain_single_layer():
    spec = fcnn()
    opts = RateOptions(samples=20_000)
    stream = RngStream(9)
    chain = rate_chain(spec, [[[1.5]]], [[1.0]], slopes=[2.0], opts=opts, stream=stream)
    single = rate_layer(spec, 1, [[1.5]], [[1.0]], opts, stream.split("layer-1"))
    assert chain.total == pytest.approx(2.0 * single.value, rel=1e-12)
    assert len(chain.terms) == 1


def test_rate_chain_at_limit_chain():
    spec = fcnn(hidden_layers=2)
    chain = limit_chain(spec, PsdMatrix([[1.0]]), 1_000_000, RngStream(10))
    result = rate_chain(spec, chain.kernels[1:], chain.kernels[0], opts=RateOptions(), stream=RngStream(11))
    assert all(t.value >= 0 for t in result.terms)
    assert result.total <= 2 * 2e-3


def test_rate_chain_needs_one_value_per_layer():
    with pytest.raises(ShapeMismatchError):
        rate_chain(fcnn(hidden_layers=2), [[[1.0]]], [[1.0]])


def test_marginal_single_layer_is_scaled_layer_rate():
    spec = fcnn(slopes=[1.5])
    result = rate_marginal(spec, [[2.0]], [[1.0]], layer_rate=analytic_layer_rate)
    assert result.value == pytest.approx(1.5 * scalar_chi_square_rate(2.0))
    assert result.intermediates == []


def test_marginal_single_layer_default_engine():
    spec = fcnn()
    opts = RateOptions(samples=20_000)
    stream = RngStream(12)
    marginal = rate_marginal(spec, [[1.5]], [[1.0]], opts=opts, stream=stream)
    single = rate_layer(spec, 1, [[1.5]], [[1.0]], opts, stream.split("layer-1"))
    assert marginal.value == single.value


def test_marginal_two_layers():
    spec = fcnn(hidden_layers=2)
    result = rate_marginal(spec, [[2.0]], [[1.0]], layer_rate=analytic_layer_rate, start=[[1.0]])
    # minimiser q2 = sqrt(2)
    assert result.value == pytest.approx(math.sqrt(2) - 1 - 0.5 * math.log(2), abs=1e-5)
    assert result.intermediates[0][0][0] == pytest.approx(math.sqrt(2), abs=1e-2)
    assert result.converged
    assert result.lower <= result.value <= result.upper


def test_marginal_at_limit_is_zero():
    spec = fcnn(hidden_layers=2)
    result = rate_marginal(spec, [[1.0]], [[1.0]], layer_rate=analytic_layer_rate, start=[[1.3]])
    assert result.value == pytest.approx(0.0, abs=1e-6)
    assert result.intermediates[0][0][0] == pytest.approx(1.0, abs=1e-2)


def test_marginal_no_hidden_layers():
    spec = ArchSpec(hidden_layers=0, spatial_dims=[1, 1],
                    layers=[LayerSpec(extractor=ExtractorKind.FULLY_CONNECTED)])
    assert rate_marginal(spec, [[1.0]], [[1.0]]).value == 0.0
    assert rate_marginal(spec, [[2.0]], [[1.0]]).value == math.inf


def test_marginal_rejects_deep_networks():
    with pytest.raises(ValueError):
        rate_marginal(fcnn(hidden_layers=3), [[1.0]], [[1.0]], layer_rate=analytic_layer_rate)


def test_output_rate_without_signal_is_marginal():
    spec = fcnn(hidden_layers=2)
    j = output_rate(spec, [[2.0]], [0.0], [[1.0]], layer_rate=analytic_layer_rate)
    marginal = rate_marginal(spec, [[2.0]], [[1.0]], layer_rate=analytic_layer_rate)
    assert j.norm_part == 0.0
    assert j.value == pytest.approx(marginal.value, abs=1e-9)


def test_output_rate_at_limit():
    j = output_rate(fcnn(), [[1.0]], [0.0], [[1.0]], layer_rate=analytic_layer_rate)
    assert j.value == pytest.approx(0.0, abs=1e-12)


def test_output_rate_out_of_image():
    j = output_rate(fcnn(), [[0.0]], [1.0], [[1.0]], layer_rate=analytic_layer_rate)
    assert j.infinite
    assert j.value == math.inf


def test_output_rate_adds_norm():
    j = output_rate(fcnn(), [[2.0]], [1.0], [[1.0]], layer_rate=analytic_layer_rate)
    assert j.norm_part == pytest.approx(0.25)
    assert j.value == pytest.approx(0.25 + scalar_chi_square_rate(2.0))


def test_output_rate_infimum():
    result = output_rate_infimum(fcnn(), [1.0], [[1.0]], layer_rate=analytic_layer_rate)
    golden = (1 + math.sqrt(5)) / 2
    assert result.argmin == pytest.approx(golden, rel=1e-4)
    assert result.value == pytest.approx(0.5 / golden + scalar_chi_square_rate(golden), abs=1e-8)


def test_output_rate_infimum_scalar_only():
    spec = preset("circular1d-relu").arch
    with pytest.raises(ShapeMismatchError):
        output_rate_infimum(spec, np.zeros(12), np.eye(12), layer_rate=analytic_layer_rate)


def test_chi_square_tail_rate_matches_survival_function():
    assert chi_square_tail_rate(50, 1.5) == pytest.approx(-math.log(chi2.sf(75, 50)) / 50, rel=1e-12)


def test_chi_square_tail_rate_decreases_to_cramer():
    rates = [chi_square_tail_rate(n, 1.5) for n in (20, 50, 100, 200, 5000)]
    assert all(a > b for a, b in zip(rates, rates[1:]))
    assert rates[-1] == pytest.approx(scalar_chi_square_rate(1.5), abs=2e-3)
    assert scalar_chi_square_rate(1.5) == pytest.approx(0.0473, abs=1e-4)


def test_event_spec():
    stack = np.array([[[2.0]], [[1.0]], [[0.5]]])
    event = EventSpec(threshold=1.0)
    assert event.contains(event.values(stack)).tolist() == [True, True, False]
    below = EventSpec(threshold=1.0, direction="le", statistic="frobenius")
    assert below.contains(below.values(stack)).tolist() == [False, True, True]


def test_empirical_rate_covers_exact_law():
    table = empirical_rate(fcnn(), [[1.0]], EventSpec(threshold=1.5), [50], 100_000, RngStream(13))
    row = table.iloc[0]
    exact = chi_square_tail_rate(50, 1.5)
    assert row["channels"] == 50
    assert row["rate_ci_low"] <= exact <= row["rate_ci_high"]
    assert not row["undersampled"]


def test_empirical_rate_at_mean():
    table = empirical_rate(fcnn(), [[1.0]], EventSpec(threshold=1.0), [50], 20_000, RngStream(14))
    row = table.iloc[0]
    assert 0.4 < row["p_hat"] < 0.55
    assert row["rate"] < 0.03


def test_empirical_rate_rejects_input_level():
    with pytest.raises(ShapeMismatchError):
        empirical_rate(fcnn(), [[1.0]], EventSpec(level=1, threshold=1.0), [10], 10, RngStream(1))
