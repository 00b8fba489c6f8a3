"""Shape-factor tests against an independent Cox-de Boor oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilepic.core import ConfigurationError, SimulationConfig, build_geometry
from tilepic.shape import anchor_and_fraction, axis_weights, shape_weights, stencil_weights_3d


def bspline_reference(xi, order):
    """Cox-de Boor recursion on integer knots: the order+1 nonzero basis
    values at parameter xi in [0, 1), lowest node first."""
    def basis(i, p, t):
        if p == 0:
            return 1.0 if i <= t < i + 1 else 0.0
        left = (t - i) / p * basis(i, p - 1, t)
        right = (i + p + 1 - t) / p * basis(i + 1, p - 1, t)
        return left + right

    return np.array([basis(m - order, order, xi) for m in range(order + 1)])


@pytest.fixture(scope="module")
def geom():
    cfg = SimulationConfig(n_cell=(8, 8, 8), prob_lo=(0.0, 0.0, 0.0),
                           prob_hi=(8.0e-6, 8.0e-6, 8.0e-6))
    return build_geometry(cfg)


class TestShapeWeights:
    def test_order1_at_node(self):
        assert np.array_equal(shape_weights(0.0, 1), [1.0, 0.0])

    def test_order3_at_node_closed_form(self):
        w = shape_weights(0.0, 3)
        np.testing.assert_allclose(w, [1 / 6, 2 / 3, 1 / 6, 0.0], rtol=0, atol=1e-15)
        np.testing.assert_allclose(w, bspline_reference(0.0, 3), rtol=0, atol=1e-15)

    def test_order3_at_midpoint_closed_form(self):
        w = shape_weights(0.5, 3)
        np.testing.assert_allclose(w, [1 / 48, 23 / 48, 23 / 48, 1 / 48],
                                   rtol=0, atol=1e-15)
        np.testing.assert_allclose(w, bspline_reference(0.5, 3), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_matches_cox_de_boor(self, order):
        rng = np.random.default_rng(7)
        for xi in rng.uniform(0, 1, 200):
            np.testing.assert_allclose(shape_weights(xi, order),
                                       bspline_reference(xi, order),
                                       rtol=0, atol=1e-14)

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_partition_of_unity(self, order):
        rng = np.random.default_rng(11)
        xi = rng.uniform(0, 1, 10_000)
        sums = np.array([shape_weights(v, order).sum() for v in xi])
        assert np.abs(sums - 1.0).max() <= 1e-14

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_nonnegative(self, order):
        rng = np.random.default_rng(13)
        for xi in rng.uniform(0, 1, 500):
            assert (shape_weights(xi, order) >= 0).all()

    def test_unsupported_order(self):
        with pytest.raises(ConfigurationError):
            shape_weights(0.3, 4)

    @given(st.floats(min_value=0.0, max_value=1.0, exclude_max=True),
           st.sampled_from([1, 2, 3]))
    @settings(max_examples=200, deadline=None)
    def test_partition_of_unity_property(self, xi, order):
        assert abs(shape_weights(xi, order).sum() - 1.0) <= 1e-14

    @pytest.mark.parametrize("order", [1, 2, 3])
    def test_shift_consistency(self, order):
        # weights at xi -> 1- equal the next anchor's weights at xi = 0
        eps = 1e-13
        w_hi = shape_weights(1.0 - eps, order)
        w_lo = shape_weights(0.0, order)
        np.testing.assert_allclose(w_hi[1:], w_lo[:-1], rtol=0, atol=1e-12)
        assert w_hi[0] <= 1e-12


class TestAnchoring:
    def test_node_order3(self, geom):
        # exactly on a node: xi = 0, anchor one node below
        i0, xi = anchor_and_fraction(2.0e-6, 0, geom, 3)
        assert i0 == 1
        assert xi == 0.0

    def test_midpoint_order1(self, geom):
        i0, xi = anchor_and_fraction(2.5e-6, 0, geom, 1)
        assert i0 == 2
        assert xi == pytest.approx(0.5, abs=1e-12)

    def test_hand_derived_order3(self, geom):
        # coord = lo + 2.75 dx: base cell 2, cubic anchor 1, fraction 0.75
        i0, xi = anchor_and_fraction(2.75e-6, 0, geom, 3)
        assert i0 == 1
        assert xi == pytest.approx(0.75, abs=1e-12)

    def test_order2_nearest_node(self, geom):
        # order 2 anchors on the nearest node:stencil centers differ per half cell
        i0_lo, xi_lo = anchor_and_fraction(2.2e-6, 0, geom, 2)
        i0_hi, xi_hi = anchor_and_fraction(2.8e-6, 0, geom, 2)
        assert i0_lo == 1 and i0_hi == 2
        assert xi_lo == pytest.approx(0.7, abs=1e-12)
        assert xi_hi == pytest.approx(0.3, abs=1e-12)


class TestStencil3D:
    def test_single_weight_order1(self, geom):
        wx = axis_weights(2.0e-6, 0, geom, 1)
        wy = axis_weights(3.0e-6, 1, geom, 1)
        wz = axis_weights(4.0e-6, 2, geom, 1)
        st3 = stencil_weights_3d(wx, wy, wz)
        assert st3.anchor == (2, 3, 4)
        w = st3.w
        assert w[0] == 1.0
        assert np.count_nonzero(w) == 1

    def test_eighths_order1(self, geom):
        wx = axis_weights(2.5e-6, 0, geom, 1)
        wy = axis_weights(3.5e-6, 1, geom, 1)
        wz = axis_weights(4.5e-6, 2, geom, 1)
        w = stencil_weights_3d(wx, wy, wz).w
        np.testing.assert_allclose(w, 0.125, rtol=0, atol=1e-15)

    def test_partition_of_unity_order3(self, geom):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = rng.uniform(5e-7, 7.5e-6, 3)
            wx = axis_weights(p[0], 0, geom, 3)
            wy = axis_weights(p[1], 1, geom, 3)
            wz = axis_weights(p[2], 2, geom, 3)
            w = stencil_weights_3d(wx, wy, wz).w
            assert w.shape == (64,)
            assert abs(w.sum() - 1.0) <= 1e-14

    def test_flattening_is_x_fastest(self, geom):
        wx = axis_weights(2.25e-6, 0, geom, 1)
        wy = axis_weights(3.5e-6, 1, geom, 1)
        wz = axis_weights(4.75e-6, 2, geom, 1)
        w = stencil_weights_3d(wx, wy, wz).w
        expect = np.einsum("k,j,i->kji", wz.w, wy.w, wx.w).reshape(-1)
        np.testing.assert_allclose(w, expect, rtol=0, atol=1e-16)
