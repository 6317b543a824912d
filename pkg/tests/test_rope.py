import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from avfulldit import tensor as T
from avfulldit.rope import RopeConfig, SyncSpec, apply_rope, audio_positions, rope_phase, video_positions

SYNC = SyncSpec(0.25, 0.0625)


def test_tau_is_four_for_default_rates():
    assert SYNC.tau == 4.0


@pytest.mark.parametrize("f_v", [1, 8, 64])
def test_shrink_audio_aligns_video_and_audio_phases_exactly(f_v):
    cfg = RopeConfig(16, variant="shrink_audio")
    pv = video_positions(f_v, SYNC.tau, "shrink_audio")
    pa = audio_positions(4 * f_v, SYNC, "shrink_audio")
    for p in range(f_v):
        assert np.array_equal(rope_phase(pv[p], cfg), rope_phase(pa[4 * p], cfg))


def test_expand_video_aligns_with_roles_swapped():
    cfg = RopeConfig(16, variant="expand_video")
    pv = video_positions(8, SYNC.tau, "expand_video")
    pa = audio_positions(32, SYNC, "expand_video")
    assert np.array_equal(pa, np.arange(32.0))
    for p in range(8):
        assert np.array_equal(rope_phase(pv[p], cfg), rope_phase(pa[4 * p], cfg))


def test_vanilla_misaligns_every_positive_frame():
    cfg = RopeConfig(16, variant="vanilla")
    pv = video_positions(8, SYNC.tau, "vanilla")
    pa = audio_positions(32, SYNC, "vanilla")
    assert np.array_equal(rope_phase(pv[0], cfg), rope_phase(pa[0], cfg))
    for p in range(1, 8):
        assert not np.array_equal(rope_phase(pv[p], cfg), rope_phase(pa[4 * p], cfg))


def test_phase_formula_against_hand_computation():
    cfg = RopeConfig(4, base=100.0)
    np.testing.assert_array_equal(rope_phase(3.0, cfg), [3.0, 3.0 / 10.0])


def test_vanilla_reproduces_integer_rope_bitwise(rng):
    # reference: classic interleaved-pair rotation at integer positions
    cfg = RopeConfig(8, variant="vanilla")
    x = rng.standard_normal((1, 5, 2, 8))
    pos = video_positions(5, 4.0, "vanilla")
    got = apply_rope(T.tensor(x), pos, cfg).data
    ref = np.empty_like(x)
    for m in range(5):
        for i in range(4):
            theta = m / 10000.0 ** (2 * i / 8)
            c, s = math.cos(theta), math.sin(theta)
            a, b = x[0, m, :, 2 * i], x[0, m, :, 2 * i + 1]
            ref[0, m, :, 2 * i] = a * c - b * s
            ref[0, m, :, 2 * i + 1] = a * s + b * c
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.sampled_from(["vanilla", "shrink_audio", "expand_video"]))
def test_rotation_is_an_isometry(seed, variant):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 6, 3, 8))
    pos = r.uniform(-50, 50, size=6)
    y = apply_rope(T.tensor(x), pos, RopeConfig(8, variant=variant)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12)


def test_logits_depend_only_on_position_difference(rng):
    cfg = RopeConfig(8)
    q, k = rng.standard_normal(8), rng.standard_normal(8)

    def logit(m, n):
        qm = apply_rope(T.tensor(q.reshape(1, 1, 1, 8)), [m], cfg).data.ravel()
        kn = apply_rope(T.tensor(k.reshape(1, 1, 1, 8)), [n], cfg).data.ravel()
        return qm @ kn

    for d in (-3.0, -0.25, 0.0, 1.5, 7.0):
        vals = [logit(m, m - d) for m in np.linspace(-5, 5, 9)]
        np.testing.assert_allclose(vals, vals[0], atol=1e-12)


def test_bad_inputs_raise():
    with pytest.raises(ValueError):
        RopeConfig(7)
    with pytest.raises(ValueError):
        RopeConfig(8, variant="spiral")
    with pytest.raises(ValueError):
        SyncSpec(0.0, 0.1)
    with pytest.raises(T.ShapeError):
        apply_rope(T.tensor(np.ones((1, 3, 1, 8))), [0.0, 1.0], RopeConfig(8))
