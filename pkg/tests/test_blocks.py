import numpy as np
import pytest

from multipar.blocks import LN_EPS, CPTStack, cpt_forward, cpt_layer
from multipar.tensor import ConfigError, ShapeError, Tensor, layer_norm
from multipar.attention import cpa_multihead

from conftest import assert_grads_match


def _seq(rng, *shape, grad=False):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


@pytest.mark.parametrize("M", [1, 2, 3])
def test_shape_preserved(rng, M):
    stack = CPTStack.init(M, 8, 2, 32, rng)
    out, ws = cpt_forward(_seq(rng, 6, 8), _seq(rng, 6, 8), stack)
    assert out.shape == (6, 8)
    assert len(ws) == M and all(w.shape == (2, 6, 6) for w in ws)


def test_layer_matches_hand_composition(rng):
    layer = CPTStack.init(1, 8, 2, 16, rng).layers[0]
    g, z = _seq(rng, 5, 8), _seq(rng, 5, 8)
    out, _ = cpt_layer(g, z, layer)
    gq = layer_norm(g, *layer.norm_q, eps=LN_EPS)
    zk = layer_norm(z, *layer.norm_kv, eps=LN_EPS)
    g_hat = cpa_multihead(gq, zk, layer.cpa)[0].data + gq.data
    ff = np.maximum(g_hat @ layer.ffn_w1.data + layer.ffn_b1.data, 0) @ layer.ffn_w2.data + layer.ffn_b2.data
    x = ff + g_hat
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + LN_EPS)
    np.testing.assert_allclose(out.data, ref, rtol=1e-10, atol=1e-12)


def test_zero_ffn_leaves_norm_of_residual(rng):
    layer = CPTStack.init(1, 8, 2, 16, rng).layers[0]
    for t in (layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2):
        t.data[...] = 0.0
    g, z = _seq(rng, 5, 8), _seq(rng, 5, 8)
    out, _ = cpt_layer(g, z, layer)
    gq = layer_norm(g, *layer.norm_q, eps=LN_EPS)
    g_hat = cpa_multihead(gq, layer_norm(z, *layer.norm_kv, eps=LN_EPS), layer.cpa)[0] + gq
    np.testing.assert_allclose(out.data, layer_norm(g_hat, *layer.norm_out, eps=LN_EPS).data, rtol=1e-12)
    assert np.isfinite(out.data).all()


def test_single_layer_stack_is_one_call(rng):
    stack = CPTStack.init(1, 8, 2, 16, rng)
    g, z = _seq(rng, 5, 8), _seq(rng, 5, 8)
    a, _ = cpt_forward(g, z, stack)
    b, _ = cpt_layer(g, z, stack.layers[0])
    assert np.array_equal(a.data, b.data)


def test_self_stream_is_generic_path(rng):
    stack = CPTStack.init(2, 8, 2, 16, rng)
    z = _seq(rng, 5, 8)
    a, _ = cpt_forward(z, z, stack)
    b, _ = cpt_forward(Tensor(z.data.copy()), Tensor(z.data.copy()), stack)
    assert np.array_equal(a.data, b.data)


def test_keys_come_from_target_at_every_layer(rng):
    # layer 2 must see the original z_self, not layer 1's output
    stack = CPTStack.init(2, 8, 2, 16, rng)
    g, z = _seq(rng, 5, 8), _seq(rng, 5, 8)
    out, _ = cpt_forward(g, z, stack)
    g1, _ = cpt_layer(g, z, stack.layers[0])
    g2, _ = cpt_layer(g1, z, stack.layers[1])
    assert np.array_equal(out.data, g2.data)


def test_causal_perturbation_of_last_step(rng):
    stack = CPTStack.init(3, 8, 2, 16, rng)
    g, z = _seq(rng, 6, 8), rng.normal(size=(6, 8))
    a, _ = cpt_forward(g, Tensor(z), stack)
    z2 = z.copy()
    z2[-1] += rng.normal(size=8) * 5
    b, _ = cpt_forward(g, Tensor(z2), stack)
    assert np.array_equal(a.data[:-1], b.data[:-1])
    assert not np.allclose(a.data[-1], b.data[-1])


def test_two_layer_gradients(rng):
    stack = CPTStack.init(2, 6, 2, 12, rng)
    g, z = _seq(rng, 2, 4, 6, grad=True), _seq(rng, 2, 4, 6, grad=True)
    wts = _seq(rng, 2, 4, 6)
    assert_grads_match(lambda: (cpt_forward(g, z, stack)[0] * wts).sum(),
                       [g, z, *stack.tensors().values()], rtol=1e-4)


def test_errors(rng):
    with pytest.raises(ConfigError):
        CPTStack.init(0, 8, 2, 16, rng)
    with pytest.raises(ConfigError):
        CPTStack.init(1, 8, 2, 4, rng)
    layer = CPTStack.init(1, 8, 2, 16, rng).layers[0]
    with pytest.raises(ShapeError):
        cpt_layer(_seq(rng, 5, 8), _seq(rng, 4, 8), layer)
