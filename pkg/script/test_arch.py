#!/usr/bin/env python3
"""
Tests for architectures, patch extractors and the growth probe
Run with: pytest script/test_arch.py
"""

import sys
import os
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cnnldp.arch import (ZERO_PAD_2D_OFFSETS, Activation, ActivationKind, ActivationTable, ArchSpec,
                         ExtractorKind, LayerSpec, MaskSet, channel_profile, extract_patch,
                         extractor_operator, growth_probe, validate_arch)
from cnnldp.errors import InvalidSiteError
from cnnldp.gauss import RngStream


def circular(n=5, halfwidth=1, layers=1, activation=ActivationKind.RELU):
    return ArchSpec(
        hidden_layers=layers - 1, spatial_dims=[n] * (layers + 1), slopes=[1.0] * (layers - 1),
        layers=[LayerSpec(extractor=ExtractorKind.CIRCULAR_1D, halfwidth=halfwidth) for _ in range(layers)],
        activation=Activation(kind=activation),
    )


def fcnn(activation=Activation(kind=ActivationKind.IDENTITY)):
    return ArchSpec(
        hidden_layers=1, spatial_dims=[1, 1, 1], slopes=[1.0],
        layers=[LayerSpec(extractor=ExtractorKind.FULLY_CONNECTED) for _ in range(2)],
        activation=activation,
    )


def zeropad(side=2):
    n = (side + 1) ** 2
    return ArchSpec(
        hidden_layers=0, spatial_dims=[n, n],
        layers=[LayerSpec(extractor=ExtractorKind.ZERO_PAD_2D, grid_side=side)],
    )


SQUARE = ActivationTable(xs=[-2.0, -1.0, 0.0, 1.0, 2.0], ys=[4.0, 1.0, 0.0, 1.0, 4.0],
                         extension="power", exponent=2.0)


def test_circular_patch_wraps_around():
    patch = extract_patch(circular(), 0, 1, [10, 20, 30, 40, 50])
    assert_allclose(patch, [50, 10, 20])


def test_fully_connected_patch_is_identity():
    assert_allclose(extract_patch(fcnn(), 0, 1, [7.0]), [7.0])


def test_zeropad_corner_patch_zeroes_out_of_grid_offsets():
    patch = extract_patch(zeropad(), 0, (0, 0), np.ones(9))
    expected = [1.0 if 0 <= a and 0 <= b else 0.0 for a, b in ZERO_PAD_2D_OFFSETS]
    assert_allclose(patch, expected)
    assert int(patch.sum()) == 4


def test_zeropad_centre_sees_whole_window():
    z = np.arange(9, dtype=float)
    patch = extract_patch(zeropad(), 0, (1, 1), z)
    assert sorted(patch.tolist()) == list(range(9))
    assert patch[0] == 4.0


def test_pool2_averages_pairs():
    spec = ArchSpec(hidden_layers=0, spatial_dims=[8, 4],
                    layers=[LayerSpec(extractor=ExtractorKind.CIRCULAR_1D_POOL2)])
    z = np.arange(1, 9, dtype=float)
    # site 1 reads pooled cells 4, 1, 2 of (1.5, 3.5, 5.5, 7.5)
    assert_allclose(extract_patch(spec, 0, 1, z), [7.5, 1.5, 3.5])


@pytest.mark.parametrize("site", [0, 6, (1, 1)])
def test_invalid_1d_site(site):
    with pytest.raises(InvalidSiteError):
        extract_patch(circular(), 0, site, np.zeros(5))


def test_invalid_2d_site():
    with pytest.raises(InvalidSiteError):
        extract_patch(zeropad(), 0, (3, 0), np.zeros(9))


def test_circular_patches_shift_with_input():
    spec = circular(n=7, halfwidth=2)
    z = np.random.default_rng(4).standard_normal(7)
    shifted = np.roll(z, -1)
    for i in range(1, 8):
        assert_allclose(extract_patch(spec, 0, i % 7 + 1, z), extract_patch(spec, 0, i, shifted))


def test_pool2_constant_input():
    spec = ArchSpec(hidden_layers=0, spatial_dims=[8, 4],
                    layers=[LayerSpec(extractor=ExtractorKind.CIRCULAR_1D_POOL2)])
    for site in range(1, 5):
        assert_allclose(extract_patch(spec, 0, site, np.full(8, 2.5)), [2.5, 2.5, 2.5])


def test_zeropad_zero_input():
    spec = zeropad()
    for a in range(3):
        for b in range(3):
            assert_allclose(extract_patch(spec, 0, (a, b), np.zeros(9)), np.zeros(9))


def test_operator_matches_patches():
    spec = circular(n=7, halfwidth=2)
    op = extractor_operator(spec, 0)
    z = np.random.default_rng(3).standard_normal(7)
    for i in range(1, 8):
        assert_allclose(op[i - 1] @ z, extract_patch(spec, 0, i, z))


def test_well_formed_spec_passes():
    report = validate_arch(circular(n=6, layers=3))
    assert report.passed
    assert report.summary() == "pass"


def test_pool2_with_odd_input_fails():
    spec = ArchSpec(hidden_layers=0, spatial_dims=[7, 3],
                    layers=[LayerSpec(extractor=ExtractorKind.CIRCULAR_1D_POOL2)])
    report = validate_arch(spec)
    assert not report.passed
    assert any("N_l = 2N_(l+1) fails" in v for v in report.violations)


def test_mask_cardinality_mismatch():
    mask = MaskSet(elements=list(ZERO_PAD_2D_OFFSETS[:8]), size=9)
    spec = ArchSpec(hidden_layers=0, spatial_dims=[9, 9],
                    layers=[LayerSpec(extractor=ExtractorKind.ZERO_PAD_2D, grid_side=2, mask=mask)])
    report = validate_arch(spec)
    assert any("mask cardinality" in v for v in report.violations)


def test_nonpositive_slope():
    spec = circular(n=6, layers=2)
    spec.slopes = [0.0]
    report = validate_arch(spec)
    assert any("alpha_1" in v for v in report.violations)


def test_nonpositive_precision():
    spec = circular(n=6, layers=2)
    spec.layers[1].precision = -1.0
    report = validate_arch(spec)
    assert report.violations == ["layer 1 (circular1d): precision lambda must be positive"]


def test_wide_window_fails():
    report = validate_arch(circular(n=5, halfwidth=2))
    assert any("2*halfwidth+1" in v for v in report.violations)


def test_channel_profile_rounds_half_up():
    spec = circular(n=6, layers=3)
    spec.slopes = [0.5, 1.5]
    assert channel_profile(spec, 3) == [2, 5]
    assert channel_profile(spec, 1) == [1, 2]


def test_identity_growth_is_linear():
    report = growth_probe(fcnn(), 1, stream=RngStream(1))
    assert report.order == pytest.approx(1.0, abs=0.05)
    assert not report.flagged


def test_square_table_growth_is_flagged():
    spec = fcnn(Activation(kind=ActivationKind.TABLE, table=SQUARE))
    report = growth_probe(spec, 1, stream=RngStream(1))
    assert report.order == pytest.approx(2.0, abs=0.05)
    assert report.flagged
    assert not validate_arch(spec, probe_stream=RngStream(1)).passed


def test_tanh_growth_is_flat():
    report = growth_probe(fcnn(Activation(kind=ActivationKind.TANH)), 1, stream=RngStream(1))
    assert report.order == pytest.approx(0.0, abs=0.05)
    assert not report.flagged


@pytest.mark.parametrize("extension,x,expected", [
    ("constant", 5.0, 4.0),
    ("linear", 3.0, 7.0),
    ("power", 4.0, 16.0),
    ("power", -6.0, 36.0),
])
def test_table_extensions(extension, x, expected):
    table = SQUARE.model_copy(update={"extension": extension})
    assert table.evaluate(np.array([x]))[0] == pytest.approx(expected)


def test_table_interpolates_inside():
    assert SQUARE.evaluate(np.array([1.5]))[0] == pytest.approx(2.5)


def test_bad_table_is_reported():
    spec = fcnn(Activation(kind=ActivationKind.TABLE,
                           table=ActivationTable(xs=[0.0, 0.0, 1.0], ys=[0.0, 1.0, 2.0])))
    report = validate_arch(spec)
    assert any("strictly increasing" in v for v in report.violations)


def test_validate_keeps_growth_reports():
    spec = fcnn(Activation(kind=ActivationKind.TANH))
    report = validate_arch(spec, probe_stream=RngStream(2))
    assert [g.layer for g in report.growth] == [0, 1]
    direct = growth_probe(spec, 1, stream=RngStream(2).split("growth-1"))
    assert report.growth[1].order == direct.order
    assert validate_arch(spec).growth == []
