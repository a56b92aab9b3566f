import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srmamba.abss import (PLANES, DirectionalSequences, abss_forward, cross_merge, cross_scan,
                          direction_indices, plane_grid, plane_rearrange, plane_restore, plane_scan)
from srmamba.ssm import init_ssm_params
from srmamba.tensor import ShapeError, Tensor

from oracles import traversal_orders


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


def feedthrough_params(C, N=3):
    rng = np.random.default_rng(0)
    params = {}
    for plane in PLANES:
        p = init_ssm_params(C, N, rng, dtype=np.float64)
        p.w_c.data[:] = 0.0
        p.d_skip.data[:] = 1.0
        params[plane] = p
    return params


def random_params(C, N, seed):
    rng = np.random.default_rng(seed)
    return {plane: init_ssm_params(C, N, rng, dtype=np.float64) for plane in PLANES}


def test_sagittal_shape_and_enumeration():
    h, w, d = np.indices((2, 2, 2))
    x = (100 * h + 10 * w + d)[None].astype(float)
    f = plane_rearrange(t64(x), "sagittal")
    assert f.shape == (1, 2, 4)
    # position (h, w*D + d) holds x[h, w, d]
    assert f.data[0, 1].tolist() == [100, 101, 110, 111]


@pytest.mark.parametrize("plane,trail", [("sagittal", (2, 3)), ("coronal", (1, 3)), ("axial", (1, 2))])
def test_rearrange_index_arithmetic(rng, plane, trail):
    x = rng.standard_normal((2, 3, 4, 5))
    f = plane_rearrange(t64(x), plane).data
    shape = x.shape
    slice_ax = ({1, 2, 3} - set(trail)).pop()
    for c in range(2):
        for idx in np.ndindex(*shape[1:]):
            a = idx[slice_ax - 1]
            r, q = idx[trail[0] - 1], idx[trail[1] - 1]
            assert f[c, a, r * shape[trail[1]] + q] == x[(c,) + idx]


@pytest.mark.parametrize("plane", PLANES)
def test_rearrange_roundtrip_and_sum(rng, plane):
    x = rng.standard_normal((3, 2, 5, 4))
    f = plane_rearrange(t64(x), plane)
    assert np.array_equal(plane_restore(f, plane, x.shape).data, x)
    assert f.data.sum() == pytest.approx(x.sum(), abs=1e-12)


def test_plane_aliases():
    assert plane_grid((1, 2, 3, 4), "h") == (3, 4)
    assert plane_grid((1, 2, 3, 4), "w") == (2, 4)
    assert plane_grid((1, 2, 3, 4), "d") == (2, 3)
    with pytest.raises(ValueError):
        plane_grid((1, 2, 3, 4), "oblique")


def test_cross_scan_2x2_example():
    f = t64([[[1, 2, 3, 4]]])
    seqs = cross_scan(f, (2, 2))
    got = [s.data[0, 0].tolist() for s in seqs.seqs]
    assert got == [[1, 2, 3, 4], [1, 3, 2, 4], [4, 3, 2, 1], [4, 2, 3, 1]]


def test_single_row_grid_degenerates():
    seqs = cross_scan(t64(np.arange(5.0).reshape(1, 1, 5)), (1, 5))
    assert np.array_equal(seqs.seqs[0].data, seqs.seqs[1].data)
    assert np.array_equal(seqs.seqs[2].data, seqs.seqs[3].data)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6))
def test_direction_indices_match_enumeration(rows, cols):
    idx = direction_indices(rows, cols)
    for got, want in zip(idx, traversal_orders(rows, cols)):
        assert got.tolist() == want
        assert np.array_equal(got[np.argsort(got)], np.arange(rows * cols))


def test_merge_identity_is_four_x(rng):
    f = t64(rng.standard_normal((2, 3, 12)))
    assert np.array_equal(cross_merge(cross_scan(f, (3, 4))).data, 4 * f.data)


def test_merge_with_one_direction_zeroed(rng):
    f = t64(rng.standard_normal((2, 3, 6)))
    seqs = cross_scan(f, (2, 3))
    seqs.seqs[2] = t64(np.zeros(f.shape))
    assert np.array_equal(cross_merge(seqs).data, 3 * f.data)


def test_merge_matches_inverse_permute_oracle(rng):
    rows, cols = 3, 4
    outs = [rng.standard_normal((2, 2, rows * cols)) for _ in range(4)]
    got = cross_merge(DirectionalSequences([t64(o) for o in outs], (rows, cols))).data
    want = np.zeros_like(outs[0])
    for o, order in zip(outs, traversal_orders(rows, cols)):
        for t, pos in enumerate(order):
            want[..., pos] += o[..., t]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)


def test_directional_sequences_validate_shapes():
    with pytest.raises(ShapeError):
        DirectionalSequences([t64(np.ones((1, 1, 2)))] * 3, (1, 2))
    with pytest.raises(ShapeError):
        DirectionalSequences([t64(np.ones((1, 1, 2)))] * 3 + [t64(np.ones((1, 1, 3)))], (1, 2))


def test_single_voxel_feedthrough_is_twelve_x():
    x = t64([[[[0.7]]], [[[-1.3]]]])
    assert np.array_equal(abss_forward(x, feedthrough_params(2)).data, 12 * x.data)


def test_feedthrough_is_twelve_x(rng):
    x = t64(rng.standard_normal((3, 4, 3, 2)))
    np.testing.assert_allclose(abss_forward(x, feedthrough_params(3)).data, 12 * x.data, rtol=0, atol=1e-10)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 999))
def test_output_shape_equals_input(C, H, W, D, seed):
    x = t64(np.random.default_rng(seed).standard_normal((C, H, W, D)))
    assert abss_forward(x, random_params(C, 2, seed)).shape == x.shape


def test_plane_identity_transform(rng):
    x = t64(rng.standard_normal((2, 3, 4, 2)))
    for plane in PLANES:
        y = plane_scan(x, plane, None, transform=lambda s: s)
        assert np.array_equal(y.data, 4 * x.data)


def test_swapping_h_and_w_permutes_output(rng):
    C = 2
    x = rng.standard_normal((C, 3, 4, 2))
    p = random_params(C, 3, 7)
    y = abss_forward(t64(x), p).data
    # sagittal of the swapped volume is coronal of the original and vice versa
    q = {"sagittal": p["coronal"], "coronal": p["sagittal"], "axial": p["axial"]}
    ys = abss_forward(t64(x.transpose(0, 2, 1, 3)), q).data
    np.testing.assert_allclose(ys, y.transpose(0, 2, 1, 3), rtol=0, atol=1e-12)


def test_abss_mixes_within_each_slice(rng):
    x = rng.standard_normal((2, 4, 4, 4))
    p = random_params(2, 3, 1)
    y0 = abss_forward(t64(x), p).data
    x[:, 0, 0, 0] += 1.0
    y1 = abss_forward(t64(x), p).data
    # reaches the far corner of the shared sagittal slice, but slices stay independent
    assert np.abs(y1 - y0)[:, 0, 3, 3].max() > 0
    assert np.array_equal(y1[:, 3, 3, 3], y0[:, 3, 3, 3])
