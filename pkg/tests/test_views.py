import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvcnn.errors import DimensionError, ParameterError, StaleCacheError
from mvcnn.views import (
    SMOOTHED,
    ViewCombination,
    ViewParams,
    gaussian_derivative_kernels,
    grad_magnitude,
    grad_x,
    grad_y,
    normalize_channel,
    read_mvvs,
    read_mvvs_header,
    stack_views,
    to_luminance,
    write_mvvs,
)
from scipy import ndimage


def ramp(n=40, axis=1):
    r = np.tile(np.arange(n, dtype=np.float64), (n, 1))
    return r if axis == 1 else r.T


def interior(field, m):
    return field[m:-m, m:-m]


# --- params / combos ---------------------------------------------------------------


def test_view_params_validation():
    with pytest.raises(ParameterError):
        ViewParams(sigma=0)
    with pytest.raises(ParameterError):
        ViewParams(d=0)
    with pytest.raises(ParameterError):
        ViewParams(mode="sobel")
    assert ViewParams(sigma=1.0).kernel_width == 7
    assert ViewParams(sigma=1.5).radius == 5


def test_combination_channel_counts_in_table_order():
    assert [c.value for c in ViewCombination] == ["rgb", "rgb+gxgy", "rgb+gxgygm", "rgb+gm"]
    assert [c.channel_count for c in ViewCombination] == [3, 5, 6, 4]
    for combo in ViewCombination:
        assert combo.channel_count == 3 + len(combo.views)
        assert ViewCombination.from_channels(combo.channel_count) is combo
        assert ViewCombination.parse(combo.value.upper()) is combo
    with pytest.raises(ParameterError):
        ViewCombination.parse("rgb+depth")


# --- luminance ---------------------------------------------------------------------


def test_luminance_examples():
    assert to_luminance(np.ones((1, 1, 3)))[0, 0] == pytest.approx(1.0)
    assert to_luminance(np.array([[[1.0, 0, 0]]]))[0, 0] == pytest.approx(0.299)
    for v in (0.0, 0.25, 0.8):
        np.testing.assert_allclose(to_luminance(np.full((2, 3, 3), v)), v, atol=1e-12)
    with pytest.raises(DimensionError):
        to_luminance(np.zeros((4, 4, 4)))


# --- kernels -----------------------------------------------------------------------


@pytest.mark.parametrize("sigma", [0.5, 1.0, 1.7, 2.0])
def test_kernel_structure(sigma):
    kx, ky = gaussian_derivative_kernels(ViewParams(sigma=sigma))
    assert kx.shape == (ViewParams(sigma=sigma).kernel_width,) * 2
    assert abs(kx.sum()) < 1e-10
    np.testing.assert_array_equal(ky, kx.T)
    np.testing.assert_allclose(kx, -kx[:, ::-1], atol=1e-15)  # odd in x
    np.testing.assert_allclose(kx, kx[::-1, :], atol=1e-15)  # even in y


@pytest.mark.parametrize("sigma", [0.7, 1.0, 2.0])
def test_kernel_ramp_response_is_one(sigma):
    p = ViewParams(sigma=sigma)
    kx, ky = gaussian_derivative_kernels(p)
    m = p.radius
    np.testing.assert_allclose(interior(ndimage.convolve(ramp(), kx), m), 1.0, atol=1e-6)
    np.testing.assert_allclose(interior(ndimage.convolve(ramp(axis=0), ky), m), 1.0, atol=1e-6)


# --- grad_x / grad_y ---------------------------------------------------------------


@pytest.mark.parametrize("d", [1, 2, 3])
def test_horizontal_ramp_energy(d):
    p = ViewParams(d=d)
    gx = grad_x(ramp(), p)
    np.testing.assert_allclose(interior(gx, p.radius + d), (2 * d + 1) ** 2, atol=1e-4)
    gy = grad_y(ramp(), p)
    np.testing.assert_allclose(interior(gy, p.radius + d), 0.0, atol=1e-6)


@pytest.mark.parametrize("d", [1, 2])
def test_vertical_ramp_energy(d):
    p = ViewParams(d=d)
    np.testing.assert_allclose(interior(grad_y(ramp(axis=0), p), p.radius + d), (2 * d + 1) ** 2, atol=1e-4)
    np.testing.assert_allclose(interior(grad_x(ramp(axis=0), p), p.radius + d), 0.0, atol=1e-6)


def test_smoothed_mode_returns_abs_derivative():
    p = ViewParams(mode=SMOOTHED)
    np.testing.assert_allclose(interior(grad_x(-ramp(), p), p.radius), 1.0, atol=1e-6)


@pytest.mark.parametrize("mode", ["paper-literal", SMOOTHED])
def test_constant_image_has_no_gradient(mode):
    p = ViewParams(mode=mode)
    const = np.full((20, 24), 0.4)
    assert not grad_x(const, p).any()
    assert not grad_y(const, p).any()


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_derivative_matches_scipy_convolution(sigma):
    p = ViewParams(sigma=sigma, d=2)
    img = np.random.default_rng(7).random((25, 33))
    dx = ndimage.convolve(img, gaussian_derivative_kernels(p)[0], mode="mirror")
    window = np.ones((5, 5))
    np.testing.assert_allclose(grad_x(img, p), ndimage.correlate(dx * dx, window, mode="mirror"), atol=1e-12)


def test_too_small_image():
    with pytest.raises(DimensionError):
        grad_x(np.zeros((6, 30)), ViewParams(sigma=1.0))


def test_grad_y_is_transposed_grad_x():
    img = np.random.default_rng(0).random((23, 31))
    np.testing.assert_array_equal(grad_y(img), grad_x(img.T).T)


@settings(max_examples=20, deadline=None)
@given(
    arrays(np.float64, (32, 32), elements=st.floats(0, 1)),
    st.sampled_from(["paper-literal", SMOOTHED]),
    st.integers(1, 3),
)
def test_rotation_swaps_grad_x_and_grad_y(img, mode, k):
    p = ViewParams(mode=mode)
    rot = np.rot90(img, k)
    gx, gy = grad_x(img, p), grad_y(img, p)
    rx, ry = grad_x(rot, p), grad_y(rot, p)
    if k % 2:
        np.testing.assert_allclose(rx, np.rot90(gy, k), atol=1e-5)
        np.testing.assert_allclose(ry, np.rot90(gx, k), atol=1e-5)
    else:
        np.testing.assert_allclose(rx, np.rot90(gx, k), atol=1e-5)
    np.testing.assert_allclose(grad_magnitude(rx, ry), np.rot90(grad_magnitude(gx, gy), k), atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (16, 20), elements=st.floats(0, 1)))
def test_paper_literal_is_nonnegative(img):
    assert grad_x(img).min() >= 0
    assert grad_y(img).min() >= 0


# --- magnitude / normalization -------------------------------------------------------


def test_magnitude_examples():
    assert grad_magnitude(np.zeros((2, 2)), np.zeros((2, 2))).max() == 0
    assert grad_magnitude(np.array([[3.0]]), np.array([[4.0]]))[0, 0] == 5.0
    with pytest.raises(DimensionError):
        grad_magnitude(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (5, 5), elements=st.floats(-100, 100)),
    arrays(np.float64, (5, 5), elements=st.floats(-100, 100)),
)
def test_magnitude_dominates_components(gx, gy):
    m = grad_magnitude(gx, gy)
    assert np.all(m >= np.maximum(np.abs(gx), np.abs(gy)) - 1e-12)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_channel(np.array([2.0, 4.0, 6.0])), [0, 0.5, 1])
    np.testing.assert_array_equal(normalize_channel(np.full((3, 3), 7.0)), 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 7), elements=st.floats(-1e6, 1e6)))
def test_normalize_spans_unit_interval(field):
    out = normalize_channel(field)
    assert out.min() >= 0 and out.max() <= 1
    if field.max() > field.min():
        assert out.min() == 0 and out.max() == 1


# --- stacks ------------------------------------------------------------------------


def test_rgb_stack_is_identity():
    rgb = np.random.default_rng(3).random((16, 16, 3)).astype(np.float32)
    s = stack_views(rgb, "rgb")
    assert s.data.shape == (3, 16, 16)
    np.testing.assert_array_equal(s.data, rgb.transpose(2, 0, 1))


@pytest.mark.parametrize("combo,count", [("rgb+gm", 4), ("rgb+gxgy", 5), ("rgb+gxgygm", 6)])
def test_stack_channel_counts_and_order(combo, count):
    rgb = np.random.default_rng(4).random((20, 20, 3))
    s = stack_views(rgb, combo)
    assert s.data.shape == (count, 20, 20) and s.data.dtype == np.float32
    assert s.tensor.shape == (1, count, 20, 20)
    luma = to_luminance(rgb)
    gx, gy = grad_x(luma), grad_y(luma)
    expected = {"gx": gx, "gy": gy, "gm": grad_magnitude(gx, gy)}
    for i, view in enumerate(ViewCombination.parse(combo).views):
        np.testing.assert_allclose(s.data[3 + i], normalize_channel(expected[view]), atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(
    arrays(np.float64, (18, 18, 3), elements=st.floats(0, 1)),
    st.sampled_from(list(ViewCombination)),
    st.sampled_from(["paper-literal", SMOOTHED]),
)
def test_stack_channels_in_unit_range_and_deterministic(rgb, combo, mode):
    p = ViewParams(mode=mode)
    a = stack_views(rgb, combo, p)
    b = stack_views(rgb, combo, p)
    assert a.data.min() >= 0 and a.data.max() <= 1
    assert a.data.tobytes() == b.data.tobytes()


# --- MVVS files --------------------------------------------------------------------


def test_mvvs_round_trip_and_layout(tmp_path):
    data = np.random.default_rng(5).random((4, 6, 5)).astype(np.float32)
    path = tmp_path / "a.mvvs"
    write_mvvs(path, data)
    raw = path.read_bytes()
    assert len(raw) == 16 + data.size * 4
    assert struct.unpack("<4sHHII", raw[:16]) == (b"MVVS", 1, 4, 6, 5)
    assert read_mvvs_header(path) == (4, 6, 5)
    np.testing.assert_array_equal(read_mvvs(path), data)
    # channel-major payload
    assert np.frombuffer(raw[16:20], "<f4")[0] == data[0, 0, 0]


def test_mvvs_bad_files(tmp_path):
    bad = tmp_path / "bad.mvvs"
    bad.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(StaleCacheError):
        read_mvvs(bad)
    write_mvvs(bad, np.zeros((2, 3, 3)))
    bad.write_bytes(bad.read_bytes()[:-4])
    with pytest.raises(StaleCacheError):
        read_mvvs(bad)
