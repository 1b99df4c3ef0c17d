import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpfedsim.params import (
    LayoutSpec,
    ParamVector,
    axpy,
    flatten,
    l2_norm,
    scale,
    unflatten,
    zeros,
)


def scalar_loop_norm(values):
    """Independent left-to-right scalar oracle."""
    total = 0.0
    for v in values:
        total += float(v) * float(v)
    return math.sqrt(total)


class TestL2Norm:
    def test_pythagorean(self):
        assert l2_norm(ParamVector([3.0, 4.0])) == 5.0

    def test_all_zero(self):
        assert l2_norm(zeros(10)) == 0.0

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(42)
        v = rng.normal(size=100)
        expected = scalar_loop_norm(v)
        got = l2_norm(ParamVector(v))
        assert abs(got - expected) <= 1e-12 * expected

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite parameter"):
            l2_norm(ParamVector([1.0, np.nan]))

    def test_underflow_still_nonzero(self):
        v = ParamVector([1e-200, 1e-200])
        assert l2_norm(v) == pytest.approx(1e-200 * math.sqrt(2), rel=1e-12)

    def test_overflow_handled(self):
        v = ParamVector([1e200, 1e200])
        assert l2_norm(v) == pytest.approx(1e200 * math.sqrt(2), rel=1e-12)


class TestAxpy:
    def test_zero_coefficient_is_identity(self):
        rng = np.random.default_rng(1)
        x = ParamVector(rng.normal(size=16), "l")
        y = ParamVector(rng.normal(size=16), "l")
        assert np.array_equal(axpy(0.0, x, y).values, y.values)

    def test_unit_case(self):
        x = ParamVector([1.0, 1.0], "l")
        assert np.array_equal(axpy(1.0, x, x).values, [2.0, 2.0])

    def test_mean_accumulation_matches_sequential_oracle(self):
        rng = np.random.default_rng(7)
        vecs = [rng.normal(size=8) for _ in range(5)]
        acc = zeros(8, "l")
        for v in vecs:
            acc = axpy(0.2, ParamVector(v, "l"), acc)
        # sequential scalar reference with the same two-op rounding
        expected = np.zeros(8)
        for v in vecs:
            for j in range(8):
                expected[j] = 0.2 * v[j] + expected[j]
        assert np.array_equal(acc.values, expected)

    def test_layout_mismatch_rejected(self):
        x = ParamVector([1.0], "a")
        y = ParamVector([1.0], "b")
        with pytest.raises(ValueError, match="layout mismatch"):
            axpy(1.0, x, y)

    def test_exact_for_integer_inputs(self):
        rng = np.random.default_rng(3)
        x = ParamVector(rng.integers(-1000, 1000, size=64).astype(float), "l")
        y = ParamVector(rng.integers(-1000, 1000, size=64).astype(float), "l")
        out = axpy(3.0, x, y)
        assert np.array_equal(out.values, 3 * x.values.astype(np.int64) + y.values.astype(np.int64))

    def test_overflow_rejected(self):
        x = ParamVector([1e308], "l")
        with pytest.raises(ValueError, match="non-finite parameter"):
            axpy(10.0, x, x)


class TestFlattenUnflatten:
    def test_single_layer_row_major(self):
        layer = np.array([[1.0, 2.0], [3.0, 4.0]])
        pv = flatten([("m", layer)])
        assert pv.size == 4
        assert np.array_equal(pv.values, [1.0, 2.0, 3.0, 4.0])

    def test_round_trip_bit_exact(self):
        rng = np.random.default_rng(5)
        layers = [("a", rng.normal(size=(3, 2))), ("b", rng.normal(size=(4,)))]
        layout = LayoutSpec.from_layers(layers)
        back = unflatten(flatten(layers), layout)
        for name, arr in layers:
            assert np.array_equal(back[name], arr)
            assert back[name].dtype == np.float64

    def test_second_layer_offset(self):
        layout = LayoutSpec.from_shapes([("a", (3,)), ("b", (2,))])
        assert layout.layers[1].offset == 3
        assert layout.total_size == 5

    def test_length_mismatch_rejected(self):
        layout = LayoutSpec.from_shapes([("a", (3,))])
        with pytest.raises(ValueError, match="mismatch"):
            unflatten(ParamVector([1.0, 2.0], layout.layout_id), layout)

    def test_non_contiguous_layout_rejected(self):
        from dpfedsim.params import LayerSpec

        with pytest.raises(ValueError, match="not contiguous"):
            LayoutSpec((LayerSpec("a", (2,), 0), LayerSpec("b", (2,), 3)))

    def test_immutability(self):
        pv = ParamVector([1.0, 2.0])
        with pytest.raises(ValueError):
            pv.values[0] = 9.0


@given(
    a=st.floats(min_value=-1e6, max_value=1e6, allow_nan=False).filter(lambda v: v != 0),
    n=st.integers(min_value=1, max_value=50),
    seed=st.integers(min_value=0, max_value=2**31),
)
@settings(max_examples=60, deadline=None)
def test_norm_scale_homogeneity(a, n, seed):
    v = ParamVector(np.random.default_rng(seed).normal(size=n))
    lhs = l2_norm(scale(v, a))
    rhs = abs(a) * l2_norm(v)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-300)


@given(
    shapes=st.lists(
        st.tuples(
            st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=4)
        ),
        min_size=1,
        max_size=4,
    ),
    seed=st.integers(min_value=0, max_value=2**31),
)
@settings(max_examples=60, deadline=None)
def test_flatten_unflatten_bijection(shapes, seed):
    rng = np.random.default_rng(seed)
    layers = [(f"layer{i}", rng.normal(size=s)) for i, s in enumerate(shapes)]
    layout = LayoutSpec.from_layers(layers)
    pv = flatten(layers)
    assert pv.layout_id == layout.layout_id
    back = unflatten(pv, layout)
    for name, arr in layers:
        assert np.array_equal(back[name], arr)
    assert np.array_equal(flatten(list(back.items())).values, pv.values)
