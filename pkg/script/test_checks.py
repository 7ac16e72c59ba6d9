#!/usr/bin/env python3
"""
Tests for the LLN table, the energy-distance test and MGF midpoint convexity
Run with: pytest script/test_checks.py
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import math

import numpy as np
import pytest

from cnnldp.checks import energy_distance_test, lln_scaling, mgf_convexity
from cnnldp.experiments import pattern_inputs, preset
from cnnldp.gauss import PsdMatrix, RngStream
from cnnldp.kernel import InputBatch, input_kernel


def test_energy_distance_identical_samples():
    x = np.random.default_rng(1).standard_normal((40, 3))
    result = energy_distance_test(x, x.copy(), 49, RngStream(1))
    assert result["statistic"] == pytest.approx(0.0, abs=1e-12)
    assert result["p_value"] == 1.0
    assert result["samples"] == [40, 40]


def test_energy_distance_separated_samples():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((50, 2))
    y = rng.standard_normal((50, 2)) + 3.0
    result = energy_distance_test(x, y, 99, RngStream(2))
    assert result["statistic"] > 0
    assert result["p_value"] == pytest.approx(1 / 100)


def test_energy_distance_flattens_tensors():
    rng = np.random.default_rng(3)
    result = energy_distance_test(rng.standard_normal((20, 1, 2, 2)), rng.standard_normal((30, 1, 2, 2)),
                                  19, RngStream(3))
    assert result["samples"] == [20, 30]
    assert 0 < result["p_value"] <= 1


def test_lln_rows_share_replica_streams():
    spec = preset("fcnn-scalar-identity").arch
    table = lln_scaling(spec, PsdMatrix([[1.0]]), PsdMatrix([[1.0]]), [16, 64], 1000, RngStream(4))
    assert list(table["n"]) == [16, 64]
    assert table["seed_path"].nunique() == 1
    assert math.isnan(table.loc[0, "shrink_factor"])
    # chi-square(n)/n deviations shrink like 1/sqrt(n)
    assert 1.5 <= table.loc[1, "shrink_factor"] <= 2.7


@pytest.mark.parametrize("name", ["circular1d-relu", "pool2-tanh", "zeropad2d-relu"])
def test_mgf_convexity_on_presets(name):
    spec = preset(name).arch
    k1 = input_kernel(spec, InputBatch(pattern_inputs(spec)))
    table = mgf_convexity(spec, 1, k1, 5, 5000, RngStream(5), probe_samples=5000)
    assert len(table) == 5
    assert table["passed"].all()
    assert np.all(np.isfinite(table["midpoint"]))
