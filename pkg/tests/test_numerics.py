import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import cos_oracle, pool_oracle, row_entropy_oracle, softmax_pair_oracle
from episeg.numerics import (
    EmptyMaskError,
    Prototype,
    ZeroProtoError,
    bce,
    binarize,
    binary_iou,
    cos_map,
    fgbg_softmax,
    masked_avg_pool,
    resample_mask,
    row_entropy_mean,
    sigmoid,
)

finite = st.floats(-100.0, 100.0, allow_nan=False)


def test_masked_avg_pool_mean():
    proto = masked_avg_pool(np.array([[1.0, 0.0], [3.0, 0.0]]), np.array([1.0, 1.0]))
    assert np.allclose(proto.vec, [2.0, 0.0])


def test_masked_avg_pool_one_hot(rng):
    feat = rng.normal(size=(7, 4))
    w = np.zeros(7)
    w[3] = 1.0
    assert np.allclose(masked_avg_pool(feat, w).vec, feat[3])


def test_masked_avg_pool_empty():
    with pytest.raises(EmptyMaskError):
        masked_avg_pool(np.ones((3, 2)), np.zeros(3))


def test_masked_avg_pool_matches_loop_oracle(rng):
    for _ in range(20):
        feat = rng.normal(size=(9, 5))
        w = rng.random(9)
        got = masked_avg_pool(feat, w).vec
        want = pool_oracle(feat.tolist(), w.tolist())
        assert np.allclose(got, want, atol=1e-9)


def test_cos_map_extremes(rng):
    proto = Prototype(vec=np.array([1.0, 2.0, -1.0]))
    feat = np.stack([proto.vec, -proto.vec, np.zeros(3)])
    out = cos_map(feat, proto)
    assert np.allclose(out, [1.0, -1.0, 0.0])


def test_cos_map_zero_proto():
    with pytest.raises(ZeroProtoError):
        cos_map(np.ones((2, 3)), Prototype(vec=np.zeros(3)))


def test_cos_map_matches_loop_oracle(rng):
    for _ in range(20):
        feat = rng.normal(size=(8, 6))
        vec = rng.normal(size=6)
        got = cos_map(feat, Prototype(vec=vec))
        assert np.allclose(got, cos_oracle(feat.tolist(), vec.tolist()), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(
    feat=arrays(np.float64, (6, 4), elements=finite),
    vec=arrays(np.float64, (4,), elements=finite),
    scale=st.floats(0.1, 50.0),
)
def test_cos_map_range_and_scale_invariance(feat, vec, scale):
    if np.linalg.norm(vec) == 0.0:
        return
    out = cos_map(feat, Prototype(vec=vec))
    assert np.all(out >= -1.0) and np.all(out <= 1.0)
    rescaled = cos_map(feat * scale, Prototype(vec=vec * scale))
    assert np.allclose(out, rescaled, atol=1e-9)


def test_fgbg_softmax_symmetry():
    s = np.array([0.3, -2.0, 5.0])
    assert np.allclose(fgbg_softmax(s, s, 10.0), 0.5)


def test_fgbg_softmax_scalar_value():
    # sigma(20) computed with the scalar pair oracle
    got = fgbg_softmax(np.array([1.0]), np.array([-1.0]), 10.0)[0]
    assert got == pytest.approx(softmax_pair_oracle(10.0, -10.0), abs=1e-12)
    assert got == pytest.approx(0.9999999979388463, abs=1e-12)


def test_fgbg_softmax_small_kappa_limit():
    out = fgbg_softmax(np.array([1.0, -4.0]), np.array([-1.0, 2.0]), 1e-9)
    assert np.allclose(out, 0.5, atol=1e-8)


def test_fgbg_softmax_rejects_bad_kappa():
    with pytest.raises(ValueError):
        fgbg_softmax(np.zeros(2), np.zeros(2), 0.0)


@settings(max_examples=50, deadline=None)
@given(
    s_fg=arrays(np.float64, (5,), elements=finite),
    s_bg=arrays(np.float64, (5,), elements=finite),
    bump=st.floats(0.01, 5.0),
)
def test_fgbg_softmax_monotone_in_margin(s_fg, s_bg, bump):
    base = fgbg_softmax(s_fg, s_bg, 3.0)
    more = fgbg_softmax(s_fg + bump, s_bg, 3.0)
    assert np.all(more >= base - 1e-12)


def test_binary_iou_cases():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[:2, :2] = 1
    assert binary_iou(a, a) == 1.0
    b = np.zeros((4, 4), dtype=np.uint8)
    b[2:, 2:] = 1
    assert binary_iou(a, b) == 0.0
    # overlapping 2x2 blocks sharing two cells: |I|=2, |U|=6
    c = np.zeros((4, 4), dtype=np.uint8)
    c[:2, 1:3] = 1
    assert binary_iou(a, c) == pytest.approx(2.0 / 6.0)


def test_binary_iou_empty_union():
    z = np.zeros((3, 3), dtype=np.uint8)
    assert binary_iou(z, z) == 1.0


def test_binary_iou_shape_mismatch():
    with pytest.raises(ValueError):
        binary_iou(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(
    a=arrays(np.uint8, (4, 5), elements=st.integers(0, 1)),
    b=arrays(np.uint8, (4, 5), elements=st.integers(0, 1)),
)
def test_binary_iou_symmetric_and_bounded(a, b):
    x, y = binary_iou(a, b), binary_iou(b, a)
    assert x == y
    assert 0.0 <= x <= 1.0


def test_resample_mask_constants():
    ones = np.ones((8, 6))
    assert np.allclose(resample_mask(ones, (4, 3)), 1.0)
    assert np.allclose(resample_mask(np.zeros((8, 6)), (3, 2)), 0.0)


def test_resample_mask_checkerboard_half():
    yy, xx = np.mgrid[0:8, 0:8]
    checker = ((yy + xx) % 2).astype(float)
    out = resample_mask(checker, (4, 4))
    assert np.allclose(out, 0.5)


def test_resample_mask_identity():
    rng = np.random.default_rng(3)
    m = (rng.random((5, 7)) > 0.5).astype(float)
    assert np.allclose(resample_mask(m, (5, 7)), m)


def test_resample_then_binarize(rng):
    m = (rng.random((9, 9)) > 0.5).astype(float)
    soft = resample_mask(m, (3, 3))
    assert soft.min() >= 0.0 and soft.max() <= 1.0
    assert set(np.unique(binarize(soft))) <= {0, 1}


def test_row_entropy_uniform():
    assert row_entropy_mean(np.zeros((16, 16))) == pytest.approx(math.log(16), abs=1e-12)


def test_row_entropy_peaked():
    logits = np.zeros((4, 4))
    logits[np.arange(4), np.arange(4)] = 1e3
    assert row_entropy_mean(logits) == pytest.approx(0.0, abs=1e-6)


def test_row_entropy_matches_loop_oracle(rng):
    for _ in range(20):
        logits = rng.normal(size=(6, 6)) * 3
        assert row_entropy_mean(logits) == pytest.approx(
            row_entropy_oracle(logits.tolist()), abs=1e-9
        )


@settings(max_examples=50, deadline=None)
@given(logits=arrays(np.float64, (5, 5), elements=finite))
def test_row_entropy_bounds(logits):
    h = row_entropy_mean(logits)
    assert -1e-12 <= h <= math.log(5) + 1e-12


def test_bce_values():
    assert bce(np.full(4, 0.5), np.array([1, 0, 1, 0])) == pytest.approx(math.log(2))
    assert bce(np.zeros(4), np.zeros(4)) == pytest.approx(0.0, abs=1e-6)


def test_sigmoid_stability():
    out = sigmoid(np.array([-1e4, 0.0, 1e4]))
    assert np.allclose(out, [0.0, 0.5, 1.0])
    assert np.isfinite(out).all()
