import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adderkit.tensor import (
    ConvGeometry, col2im, extract_patch, im2col, load_tensor, save_tensor, tensor_stats, to_csv,
)
from oracles import patch_loop, two_pass_stats


def test_patch_interior_all_ones():
    x = np.ones((1, 1, 3, 3))
    p = extract_patch(x, 0, 1, 1, ConvGeometry((3, 3), 1, 1))
    np.testing.assert_array_equal(p, np.ones(9))


def test_patch_corner_hits_padding():
    x = np.ones((1, 1, 3, 3))
    p = extract_patch(x, 0, 0, 0, ConvGeometry((3, 3), 1, 1))
    assert np.count_nonzero(p == 0) == 5
    assert np.count_nonzero(p == 1) == 4


def test_patch_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5)).astype(np.float32)
    geom = ConvGeometry((3, 3), 2, 0)
    for oy in range(2):
        for ox in range(2):
            np.testing.assert_array_equal(
                extract_patch(x, 0, oy, ox, geom), patch_loop(x, 0, oy, ox, 3, 3, 2, 0).astype(np.float32)
            )


@pytest.mark.parametrize("idx,dim", [((1, 0, 0), "sample"), ((0, 3, 0), "out_y"), ((0, 0, -1), "out_x")])
def test_patch_out_of_range(idx, dim):
    x = np.ones((1, 1, 3, 3))
    with pytest.raises(IndexError, match=dim):
        extract_patch(x, *idx, ConvGeometry((3, 3), 1, 1))


def test_geometry_rejects_empty_output():
    with pytest.raises(ValueError):
        ConvGeometry((5, 5), 1, 0).output_size(3, 3)


def test_im2col_agrees_with_extract_patch():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 6, 5)).astype(np.float32)
    geom = ConvGeometry((3, 2), 2, 1)
    cols = im2col(x, geom)
    n, oh, ow, k = cols.shape
    for s in range(n):
        for oy in range(oh):
            for ox in range(ow):
                # im2col is (k, i, j) ordered, extract_patch is (i, j, k)
                ref = extract_patch(x, s, oy, ox, geom).reshape(3, 2, 3).transpose(2, 0, 1).ravel()
                np.testing.assert_array_equal(cols[s, oy, ox], ref)


@pytest.mark.parametrize("shape,k,stride,pad", [((1, 1, 4, 4), 2, 2, 0), ((1, 2, 5, 5), 3, 1, 1), ((2, 1, 7, 6), 3, 2, 1)])
def test_patch_coverage_counts(shape, k, stride, pad):
    # col2im of all-ones patches counts how often each input element is covered
    x = np.zeros(shape, np.float32)
    geom = ConvGeometry((k, k), stride, pad)
    cols = np.ones_like(im2col(x, geom))
    counts = col2im(cols, shape, geom)
    oh, ow = geom.output_size(shape[2], shape[3])
    expected = np.zeros(shape)
    for oy in range(oh):
        for ox in range(ow):
            for i in range(k):
                for j in range(k):
                    yy, xx = oy * stride + i - pad, ox * stride + j - pad
                    if 0 <= yy < shape[2] and 0 <= xx < shape[3]:
                        expected[:, :, yy, xx] += 1
    np.testing.assert_array_equal(counts, expected)


def test_col2im_is_adjoint_of_im2col():
    rng = np.random.default_rng(3)
    geom = ConvGeometry((3, 3), 2, 1)
    x = rng.normal(size=(2, 2, 7, 7))
    c = rng.normal(size=im2col(x, geom).shape)
    lhs = np.sum(im2col(x, geom) * c)
    rhs = np.sum(x * col2im(c, x.shape, geom))
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_stats_constant():
    mean, var = tensor_stats(np.full((2, 3, 4, 4), 5.0))
    np.testing.assert_allclose(mean, 5.0)
    np.testing.assert_allclose(var, 0.0)


def test_stats_plus_minus_one():
    x = np.array([-1.0, 1.0, -1.0, 1.0]).reshape(1, 1, 2, 2)
    mean, var = tensor_stats(x, per_channel=False)
    assert mean == 0.0 and var == 1.0


def test_stats_match_two_pass_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5)).astype(np.float32)
    mean, var = tensor_stats(x)
    for c in range(3):
        m, v = two_pass_stats(x[:, c].ravel())
        assert mean[c] == pytest.approx(m, abs=1e-6)
        assert var[c] == pytest.approx(v, abs=1e-6)
    gm, gv = tensor_stats(x, per_channel=False)
    m, v = two_pass_stats(x.ravel())
    assert gm == pytest.approx(m, abs=1e-6) and gv == pytest.approx(v, abs=1e-6)


def test_stats_empty_raises():
    with pytest.raises(ValueError):
        tensor_stats(np.zeros((0, 1, 1, 1)))


@settings(max_examples=50, deadline=None)
@given(c=st.floats(-1e3, 1e3), seed=st.integers(0, 2**16))
def test_stats_mean_translation_equivariant(c, seed):
    x = np.random.default_rng(seed).normal(size=(2, 2, 3, 3))
    m0, _ = tensor_stats(x)
    m1, _ = tensor_stats(x + c)
    # tensors are stored as float32, so the tolerance scales with |c|
    np.testing.assert_allclose(m1, m0 + c, atol=1e-6 + 1e-6 * abs(c))


def test_binary_roundtrip(tmp_path):
    x = np.random.default_rng(5).normal(size=(2, 3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.bin"
    save_tensor(path, x)
    raw = path.read_bytes()
    assert raw[:4] == b"ADT4"
    assert np.frombuffer(raw[4:20], "<u4").tolist() == [2, 3, 4, 5]
    assert len(raw) == 20 + 4 * x.size
    np.testing.assert_array_equal(load_tensor(path), x)


def test_csv_export():
    text = to_csv(np.arange(4, dtype=np.float32).reshape(1, 1, 2, 2))
    lines = text.strip().split("\n")
    assert lines[0] == "n,c,h,w,value"
    assert lines[4] == "0,0,1,1,3.0"
