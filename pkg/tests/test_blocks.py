import numpy as np
import pytest
from hypothesis import given, strategies as st

from avfulldit import blocks as B
from avfulldit import tensor as T
from avfulldit.rope import RopeConfig


def block(seed, c=8, c_text=6, gate_bias=1.0):
    r = np.random.default_rng(seed)
    arrays = B.init_block(r, c, c_text, gate_bias)
    for name in ("n1_b", "n2_b", "n3_b", "b1", "b2"):
        arrays[name] = r.standard_normal(arrays[name].shape) * 0.1
    return B.BlockWeights(**{k: T.tensor(v, requires_grad=True) for k, v in arrays.items()})


def inputs(seed, b=2, l=5, c=8, c_text=6):
    r = np.random.default_rng(seed)
    return (T.tensor(r.standard_normal((b, l, c))), T.tensor(r.standard_normal((b, 3, c_text))),
            T.tensor(r.standard_normal((b, c))))


def test_zero_gates_make_the_block_an_identity():
    w = block(0, gate_bias=0.0)
    w.mod_w.data[:] = 0.0
    h, cond, temb = inputs(1)
    out = B.unimodal_block(h, cond, temb, w, np.arange(5.0), RopeConfig(4), heads=2)
    assert out.data.tobytes() == h.data.tobytes()


@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance_without_positional_signal(seed):
    w = block(seed % 97)
    h, cond, temb = inputs(seed)
    perm = np.random.default_rng(seed).permutation(5)
    pos = np.zeros(5)
    out = B.unimodal_block(h, cond, temb, w, pos, RopeConfig(4), heads=2).data
    out_p = B.unimodal_block(T.tensor(h.data[:, perm]), cond, temb, w, pos, RopeConfig(4), heads=2).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)


def test_rope_breaks_permutation_equivariance():
    w = block(3)
    h, cond, temb = inputs(4)
    perm = np.array([4, 3, 2, 1, 0])
    pos = np.arange(5.0)
    out = B.unimodal_block(h, cond, temb, w, pos, RopeConfig(4), heads=2).data
    out_p = B.unimodal_block(T.tensor(h.data[:, perm]), cond, temb, w, pos, RopeConfig(4), heads=2).data
    assert np.abs(out_p - out[:, perm]).max() > 1e-6


@given(st.integers(0, 2**32 - 1))
def test_outputs_are_finite(seed):
    r = np.random.default_rng(seed)
    h, cond, temb = inputs(seed)
    h = T.tensor(h.data * r.uniform(0.01, 100))
    out = B.unimodal_block(h, cond, temb, block(seed % 13), np.arange(5.0), RopeConfig(4), heads=2)
    assert np.isfinite(out.data).all()


def test_attend_matches_reference_softmax_attention(rng):
    q, k, v = (rng.standard_normal((1, 2, 4, 3)) for _ in range(3))
    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(3)
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    got = B.attend(T.tensor(q), T.tensor(k), T.tensor(v)).data
    np.testing.assert_allclose(got, p @ v, rtol=1e-12)


def test_modulation_has_nine_chunks_and_gates_start_at_bias():
    w = block(5)
    temb = T.tensor(np.zeros((1, 8)))
    mods = B.block_modulation(temb, w)
    assert len(mods) == 9 and all(m.shape == (1, 1, 8) for m in mods.values())
    for name, m in mods.items():
        assert np.all(m.data == (1.0 if name.startswith("gate") else 0.0))


def test_block_gradient_passes_the_difference_oracle():
    w = block(6)
    h, cond, temb = inputs(7)
    h = T.tensor(h.data, requires_grad=True)
    r = T.constant(np.random.default_rng(8).standard_normal(h.shape))
    f = lambda: T.sum(T.mul(B.unimodal_block(h, cond, temb, w, np.arange(5.0), RopeConfig(4), 2), r))
    params = [h, w.wq, w.wk, w.wo, w.ck, w.w1, w.n2_g, w.mod_w, w.mod_b]
    assert T.finite_difference_check(f, params, n_coords=96) < 1e-4


def test_timestep_features_reject_out_of_range():
    with pytest.raises(ValueError):
        B.timestep_features([1.5], 8)
    feats = B.timestep_features([0.0], 8)
    np.testing.assert_array_equal(feats, [[1, 1, 1, 1, 0, 0, 0, 0]])


def test_shape_mismatches_are_reported():
    w = block(0)
    with pytest.raises(T.ShapeError):
        B.self_attention(T.tensor(np.ones((1, 3, 6))), w, np.arange(3.0), None, 2)
    with pytest.raises(T.ShapeError):
        B.cross_attention(T.tensor(np.ones((1, 3, 8))), T.tensor(np.ones((1, 2, 5))), w, 2)
    with pytest.raises(T.ShapeError):
        B.split_heads(T.tensor(np.ones((1, 3, 8))), 3)


def loop_attention(q, k, v):
    """Single-head attention written as explicit loops over query and key tokens."""
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        logits = [sum(q[i, c] * k[j, c] for c in range(q.shape[1])) / np.sqrt(q.shape[1])
                  for j in range(k.shape[0])]
        top = max(logits)
        weights = [np.exp(x - top) for x in logits]
        total = sum(weights)
        for j in range(k.shape[0]):
            out[i] += weights[j] / total * v[j]
    return out


def test_single_token_self_attention_is_the_value_path(rng):
    w = block(11)
    h = T.tensor(rng.standard_normal((1, 1, 8)))
    out = B.self_attention(h, w, np.zeros(1), RopeConfig(4), heads=2).data
    np.testing.assert_allclose(out, h.data @ w.wv.data @ w.wo.data, rtol=1e-13)


def test_zero_queries_average_the_values(rng):
    w = block(12)
    w.wq.data[:] = 0.0
    h = T.tensor(rng.standard_normal((1, 5, 8)))
    out = B.self_attention(h, w, np.arange(5.0), RopeConfig(4), heads=2).data
    mean_v = (h.data @ w.wv.data).mean(axis=1, keepdims=True)
    np.testing.assert_allclose(out, np.repeat(mean_v @ w.wo.data, 5, axis=1), rtol=1e-12)


def test_three_token_self_attention_matches_loops(rng):
    w = block(13)
    h = rng.standard_normal((3, 8))
    got = B.self_attention(T.tensor(h[None]), w, None, None, heads=1).data[0]
    ref = loop_attention(h @ w.wq.data, h @ w.wk.data, h @ w.wv.data) @ w.wo.data
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-10)


def test_single_condition_token_gives_its_value_everywhere(rng):
    w = block(14)
    h = T.tensor(rng.standard_normal((1, 4, 8)))
    cond = rng.standard_normal((1, 1, 6))
    out = B.cross_attention(h, T.tensor(cond), w, heads=2).data
    row = cond[0] @ w.cv.data @ w.co.data
    np.testing.assert_allclose(out[0], np.repeat(row, 4, axis=0), rtol=1e-12)


@pytest.mark.parametrize("k", [2, 5])
def test_duplicated_condition_tokens_change_nothing(k, rng):
    w = block(15)
    h = T.tensor(rng.standard_normal((1, 4, 8)))
    cond = rng.standard_normal((1, 1, 6))
    once = B.cross_attention(h, T.tensor(cond), w, heads=2).data
    many = B.cross_attention(h, T.tensor(np.repeat(cond, k, axis=1)), w, heads=2).data
    np.testing.assert_allclose(many, once, rtol=1e-13)


def test_two_by_two_cross_attention_matches_loops(rng):
    w = block(16)
    h, cond = rng.standard_normal((2, 8)), rng.standard_normal((2, 6))
    got = B.cross_attention(T.tensor(h[None]), T.tensor(cond[None]), w, heads=1).data[0]
    ref = loop_attention(h @ w.cq.data, cond @ w.ck.data, cond @ w.cv.data) @ w.co.data
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-10)


def test_ffn_zero_weights_and_hand_case():
    w = block(17)
    for m in (w.w1, w.b1, w.w2, w.b2):
        m.data[:] = 0.0
    assert not B.ffn(T.tensor(np.ones((1, 2, 8))), w).data.any()
    # one active hidden unit: silu(1) = 1 / (1 + e^-1) lands on output channel 3
    w.w1.data[0, 0] = 1.0
    w.w2.data[0, 3] = 2.0
    x = np.zeros((1, 1, 8))
    x[0, 0, 0] = 1.0
    expected = np.zeros(8)
    expected[3] = 2.0 / (1.0 + np.exp(-1.0))
    np.testing.assert_allclose(B.ffn(T.tensor(x), w).data[0, 0], expected, rtol=1e-15)


def test_ffn_gradient():
    w = block(18)
    h = T.tensor(np.random.default_rng(19).standard_normal((1, 3, 8)), requires_grad=True)
    f = lambda: T.sum(T.mul(B.ffn(h, w), B.ffn(h, w)))
    assert T.finite_difference_check(f, [h, w.w1, w.b1, w.w2], n_coords=64) < 1e-5


def test_stack_of_zero_gate_blocks_is_the_identity():
    h, cond, temb = inputs(20)
    out = h
    for seed in range(4):
        w = block(seed, gate_bias=0.0)
        w.mod_w.data[:] = 0.0
        out = B.unimodal_block(out, cond, temb, w, np.arange(5.0), RopeConfig(4), heads=2)
    assert out.data.tobytes() == h.data.tobytes()
