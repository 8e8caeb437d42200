import numpy as np
import pytest

from msdetr import tensor as T
from msdetr._kernels import READ_COUNTER
from msdetr.deform_attn import (EncoderLayer, MSDeformAttn, deform_attn, encoder_layer,
                                ms_deform_attn, predict_offsets, predict_weights, pixel_reference_points)

from conftest import naive_bilinear


def _randomise(attn, rng, scale=0.3):
    for lin in (attn.value_proj, attn.out_proj, attn.offset_head, attn.weight_head):
        lin.weight.data = rng.normal(scale=scale, size=lin.weight.shape)
        lin.bias.data = rng.normal(scale=scale, size=lin.bias.shape)
    attn.offset_head.weight.data *= 0.2
    return attn


def _identity_projections(attn):
    d = attn.d_model
    for lin in (attn.value_proj, attn.out_proj):
        lin.weight.data = np.eye(d)
        lin.bias.data = np.zeros(d)


def loop_oracle(attn, z, ref, levels):
    """Unrolled per-head, per-level, per-point evaluation with scalar bilinear reads."""
    d, M, L, K, dv = attn.d_model, attn.n_heads, attn.n_levels, attn.n_points, attn.d_value
    Wv, bv = attn.value_proj.weight.data, attn.value_proj.bias.data
    off = (attn.offset_head.weight.data @ z + attn.offset_head.bias.data).reshape(M, L, K, 2)
    s = (attn.weight_head.weight.data @ z + attn.weight_head.bias.data).reshape(M, L * K)
    A = (np.exp(s - s.max(1, keepdims=True)) / np.exp(s - s.max(1, keepdims=True)).sum(1, keepdims=True))
    A = A.reshape(M, L, K)
    heads = np.zeros(d)
    for m in range(M):
        acc = np.zeros(dv)
        for l in range(L):
            feat = levels[l][0]
            proj = np.einsum("oc,chw->ohw", Wv, feat) + bv[:, None, None]
            for k in range(K):
                x, y = ref[0] + off[m, l, k, 0], ref[1] + off[m, l, k, 1]
                acc += A[m, l, k] * naive_bilinear(proj[m * dv:(m + 1) * dv], x, y)
        heads[m * dv:(m + 1) * dv] = acc
    return attn.out_proj.weight.data @ heads + attn.out_proj.bias.data


def test_zero_offset_head_gives_zero_offsets(rng):
    attn = MSDeformAttn(8, 2, 2, 3, rng=rng)
    attn.offset_head.bias.data[:] = 0.0
    np.testing.assert_array_equal(predict_offsets(attn, rng.normal(size=8)).data, 0.0)


def test_offsets_follow_bias_when_weights_zero(rng):
    attn = MSDeformAttn(8, 2, 2, 3, rng=rng)
    grid = rng.normal(size=attn.offset_head.bias.shape)
    attn.offset_head.bias.data = grid.copy()
    for _ in range(3):
        np.testing.assert_array_equal(predict_offsets(attn, rng.normal(size=8)).data.ravel(), grid)


def test_offsets_match_matvec(rng):
    attn = _randomise(MSDeformAttn(8, 2, 3, 2, rng=rng), rng)
    z = rng.normal(size=8)
    want = attn.offset_head.weight.data @ z + attn.offset_head.bias.data
    got = predict_offsets(attn, z).data
    assert got.shape == (2, 3, 2, 2)
    np.testing.assert_allclose(got.ravel(), want, rtol=1e-12, atol=1e-12)


def test_zero_scores_give_uniform_weights(rng):
    attn = MSDeformAttn(8, 2, 3, 4, rng=rng)
    attn.weight_head.bias.data[:] = 0.0
    np.testing.assert_allclose(predict_weights(attn, rng.normal(size=8)).data, 1 / 12, rtol=1e-14)


def test_per_head_weights_sum_to_one(rng):
    attn = _randomise(MSDeformAttn(8, 4, 3, 4, rng=rng), rng, scale=2.0)
    for _ in range(20):
        w = predict_weights(attn, rng.normal(size=8)).data
        np.testing.assert_allclose(w.sum(axis=(1, 2)), 1.0, rtol=0, atol=1e-12)


def test_saturated_score(rng):
    attn = MSDeformAttn(4, 1, 1, 4, rng=rng)
    attn.weight_head.bias.data = np.array([0.0, 50.0, 0.0, 0.0])
    w = predict_weights(attn, rng.normal(size=4)).data
    assert w[0, 0, 1] >= 1 - 1e-15


def test_single_point_identity(rng):
    attn = MSDeformAttn(3, 1, 1, 1, rng=rng)
    attn.offset_head.bias.data[:] = 0.0
    _identity_projections(attn)
    feat = rng.normal(size=(1, 3, 5, 6))
    ref = ((2 + 0.5) / 6, (3 + 0.5) / 5)
    np.testing.assert_allclose(deform_attn(attn, rng.normal(size=3), ref, feat).data, feat[0, :, 3, 2],
                               rtol=1e-13)


def test_constant_map_is_reproduced(rng):
    attn = _randomise(MSDeformAttn(4, 2, 1, 3, rng=rng), rng)
    _identity_projections(attn)
    attn.offset_head.bias.data = rng.uniform(-0.1, 0.1, size=attn.offset_head.bias.shape)
    c = np.array([0.3, -1.2, 2.0, 0.7])
    feat = np.broadcast_to(c[None, :, None, None], (1, 4, 6, 6)).copy()
    # keep every sampling location inside the map so no corner reads padding
    out = deform_attn(attn, rng.normal(size=4) * 0.01, (0.5, 0.5), feat).data
    np.testing.assert_allclose(out, c, rtol=1e-12)


def test_single_scale_loop_oracle(rng):
    attn = _randomise(MSDeformAttn(4, 2, 1, 3, rng=rng), rng)
    feat = rng.normal(size=(1, 4, 5, 5))
    z, ref = rng.normal(size=4), rng.uniform(0.1, 0.9, 2)
    np.testing.assert_allclose(deform_attn(attn, z, ref, feat).data, loop_oracle(attn, z, ref, [feat]),
                               rtol=1e-12, atol=1e-12)


def test_multi_scale_loop_oracle(rng):
    attn = _randomise(MSDeformAttn(4, 2, 3, 2, rng=rng), rng)
    levels = [rng.normal(size=(1, 4, 8 // 2 ** l, 8 // 2 ** l)) for l in range(3)]
    for _ in range(5):
        z, ref = rng.normal(size=4), rng.uniform(0, 1, 2)
        np.testing.assert_allclose(ms_deform_attn(attn, z, ref, levels).data,
                                   loop_oracle(attn, z, ref, levels), rtol=1e-12, atol=1e-12)


def test_multi_scale_single_level_is_deform_attn(rng):
    attn = _randomise(MSDeformAttn(4, 2, 1, 3, rng=rng), rng)
    feat = rng.normal(size=(1, 4, 6, 6))
    z = rng.normal(size=4)
    np.testing.assert_array_equal(ms_deform_attn(attn, z, (0.4, 0.6), [feat]).data,
                                  deform_attn(attn, z, (0.4, 0.6), feat).data)


def test_constant_levels_closed_form(rng):
    attn = _randomise(MSDeformAttn(2, 2, 3, 2, rng=rng), rng)
    _identity_projections(attn)
    attn.offset_head.weight.data[:] = 0.0
    attn.offset_head.bias.data[:] = 0.0
    c = [1.0, -2.0, 5.0]
    levels = [np.full((1, 2, 8 // 2 ** l, 8 // 2 ** l), c[l]) for l in range(3)]
    z = rng.normal(size=2)
    A = predict_weights(attn, z).data  # (M, L, K)
    want = np.array([sum(c[l] * A[m, l].sum() for l in range(3)) for m in range(2)])
    np.testing.assert_allclose(ms_deform_attn(attn, z, (0.5, 0.5), levels).data, want, rtol=1e-12)


def test_convexity_with_equal_constants(rng):
    attn = _randomise(MSDeformAttn(4, 2, 3, 4, rng=rng), rng)
    _identity_projections(attn)
    attn.offset_head.weight.data[:] = 0.0
    attn.offset_head.bias.data = rng.uniform(-0.2, 0.2, size=attn.offset_head.bias.shape)
    c = rng.normal(size=4)
    levels = [np.broadcast_to(c[None, :, None, None], (1, 4, n, n)).copy() for n in (16, 8, 4)]
    np.testing.assert_allclose(ms_deform_attn(attn, rng.normal(size=4), (0.5, 0.5), levels).data, c, rtol=1e-12)


def test_grid_node_sampling_matches_dense_sum(rng):
    attn = _randomise(MSDeformAttn(4, 2, 2, 2, rng=rng), rng)
    attn.offset_head.weight.data[:] = 0.0
    shapes = [(8, 8), (4, 4)]
    levels = [rng.normal(size=(1, 4, h, w)) for h, w in shapes]
    ref = np.array([(3 + 0.5) / 8, (5 + 0.5) / 8])
    # every offset lands on a pixel centre of its level
    off = np.zeros((2, 2, 2, 2))
    for l, (h, w) in enumerate(shapes):
        ref_px = ref * np.array([w, h]) - 0.5
        for m in range(2):
            for k in range(2):
                target = rng.integers(0, [w, h])
                off[m, l, k] = (target - ref_px) / np.array([w, h])
    attn.offset_head.bias.data = off.ravel()
    z = rng.normal(size=4)
    A = predict_weights(attn, z).data
    Wv, bv = attn.value_proj.weight.data, attn.value_proj.bias.data
    heads = np.zeros(4)
    for m in range(2):
        for l, (h, w) in enumerate(shapes):
            for k in range(2):
                px = np.rint((ref + off[m, l, k]) * np.array([w, h]) - 0.5).astype(int)
                v = Wv @ levels[l][0, :, px[1], px[0]] + bv
                heads[2 * m:2 * m + 2] += A[m, l, k] * v[2 * m:2 * m + 2]
    want = attn.out_proj.weight.data @ heads + attn.out_proj.bias.data
    np.testing.assert_allclose(ms_deform_attn(attn, z, ref, levels).data, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("size", [8, 32])
def test_reads_per_query_independent_of_map_size(rng, size):
    attn = MSDeformAttn(8, 2, 3, 4, rng=rng)
    levels = [rng.normal(size=(1, 8, size // 2 ** l, size // 2 ** l)) for l in range(3)]
    q = rng.normal(size=(1, 5, 8))
    READ_COUNTER.reset()
    attn(q, rng.uniform(size=(5, 2)), levels)
    assert READ_COUNTER.count == 5 * attn.reads_per_query() == 5 * 2 * 3 * 4 * 4


def test_level_count_mismatch(rng):
    attn = MSDeformAttn(4, 2, 3, 2, rng=rng)
    with pytest.raises(T.DimensionError):
        ms_deform_attn(attn, np.zeros(4), (0.5, 0.5), [np.zeros((1, 4, 4, 4))] * 2)


def test_gradients(rng):
    attn = _randomise(MSDeformAttn(4, 2, 2, 2, rng=rng), rng)
    levels = [rng.normal(size=(1, 4, 6, 6)), rng.normal(size=(1, 4, 3, 3))]
    ref = np.array([0.43, 0.57])
    proj = rng.normal(size=4)

    assert T.grad_check(lambda z: (ms_deform_attn(attn, z, ref, levels) * proj).sum(), rng.normal(size=4)) <= 1e-5

    def via_feature(f):
        return (ms_deform_attn(attn, np.ones(4) * 0.1, ref, [f, levels[1]]) * proj).sum()
    assert T.grad_check(via_feature, levels[0]) <= 1e-5

    w0 = attn.offset_head.weight.data.copy()
    z = rng.normal(size=4)

    def via_offset_weights(w):
        attn.offset_head.weight = w
        try:
            return (ms_deform_attn(attn, z, ref, levels) * proj).sum()
        finally:
            attn.offset_head.weight = T.Tensor(w0)
    assert T.grad_check(via_offset_weights, w0) <= 1e-5


# -- encoder layer --------------------------------------------------------------------

def _zero_encoder(layer):
    for lin in (layer.attn.out_proj, layer.ffn.fc2):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0


def test_encoder_zero_weights_is_layer_norm(rng):
    layer = EncoderLayer(8, 2, 2, 2, rng=rng)
    _zero_encoder(layer)
    levels = [rng.normal(size=(2, 8, 4, 4)), rng.normal(size=(2, 8, 2, 2))]
    for x, y in zip(levels, encoder_layer(layer, levels)):
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        # applied twice: LN of an already-normalised vector is itself up to eps
        once = (x - mu) / np.sqrt(var + 1e-5)
        twice = (once - once.mean(1, keepdims=True)) / np.sqrt(once.var(1, keepdims=True) + 1e-5)
        np.testing.assert_allclose(y.data, twice, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("L", [2, 3, 4])
def test_encoder_preserves_shapes(rng, L):
    layer = EncoderLayer(8, 2, L, 2, rng=rng)
    levels = [rng.normal(size=(1, 8, 16 // 2 ** l, 16 // 2 ** l)) for l in range(L)]
    out = layer(levels)
    assert [o.shape for o in out] == [x.shape for x in levels]


def test_encoder_single_pixel_levels(rng):
    d = 4
    layer = EncoderLayer(d, 1, 2, 2, rng=rng)
    _randomise(layer.attn, rng)
    layer.attn.offset_head.weight.data[:] = 0.0
    layer.attn.offset_head.bias.data[:] = 0.0
    _identity_projections(layer.attn)
    layer.ffn.fc2.weight.data[:] = 0.0
    layer.ffn.fc2.bias.data[:] = 0.0
    v = [rng.normal(size=d), rng.normal(size=d)]
    levels = [val.reshape(1, d, 1, 1) for val in v]
    out = layer(levels)
    # at the pixel centre each level reads exactly its single value
    pos = layer._position([(1, 1), (1, 1)], np.float64) + layer.level_embed.data
    for q in range(2):
        z = v[q] + pos[q]
        A = predict_weights(layer.attn, z).data[0]  # (L, K)
        mixed = A[0].sum() * v[0] + A[1].sum() * v[1]
        x = v[q] + mixed
        x = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
        x = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
        np.testing.assert_allclose(out[q].data.ravel(), x, rtol=1e-10, atol=1e-10)


def test_pixel_reference_points():
    ref = pixel_reference_points([(2, 2), (1, 1)])
    np.testing.assert_allclose(ref, [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75], [0.5, 0.5]])
    assert np.all((ref >= 0) & (ref <= 1))
