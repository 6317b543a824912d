"""Joint audio-video attention with width adapters, and a cross-attention baseline.

The joint attention runs at the video width ``C_v``.  Audio query/key/value
projections are widened from ``C_a`` to ``C_v`` by concatenating adapter
matrices beside the pre-trained audio matrices, and the audio output
projection is stacked with an adapter so the audio stream returns to ``C_a``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .blocks import (
    MASK_VALUE,
    BlockWeights,
    attend,
    attention_input,
    block_modulation,
    finish_block,
    heads_first,
    merge_heads,
    self_attention,
    split_heads,
)
from .rope import RopeConfig, apply_rope
from .tensor import ShapeError, Tensor


class ConfigurationError(ValueError):
    """Raised for architecture settings the model does not support."""


@dataclass
class AdapterWeights:
    wq_an: Tensor
    wk_an: Tensor
    wv_an: Tensor
    wo_an: Tensor

    @staticmethod
    def shapes(c_v: int, c_a: int) -> dict[str, tuple[int, int]]:
        extra = c_v - c_a
        return {"wq_an": (c_a, extra), "wk_an": (c_a, extra), "wv_an": (c_a, extra), "wo_an": (extra, c_a)}

    @classmethod
    def from_params(cls, params, prefix):
        return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})


@dataclass
class CrossModalWeights:
    """Extra projections of the cross-attention ablation (video<-audio and audio<-video)."""

    vq: Tensor
    vk: Tensor
    vv: Tensor
    vo: Tensor
    v_gate: Tensor
    aq: Tensor
    ak: Tensor
    av: Tensor
    ao: Tensor
    a_gate: Tensor

    @staticmethod
    def shapes(c_v: int, c_a: int) -> dict[str, tuple[int, ...]]:
        return {
            "vq": (c_v, c_v), "vk": (c_a, c_v), "vv": (c_a, c_v), "vo": (c_v, c_v), "v_gate": (c_v,),
            "aq": (c_a, c_v), "ak": (c_v, c_v), "av": (c_v, c_v), "ao": (c_v, c_a), "a_gate": (c_a,),
        }

    @classmethod
    def from_params(cls, params, prefix):
        return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})


@dataclass
class JointBlockWeights:
    video: BlockWeights
    audio: BlockWeights
    adapters: AdapterWeights | None = None
    cross: CrossModalWeights | None = None


def check_widths(c_v: int, c_a: int) -> None:
    if c_v < c_a:
        raise ConfigurationError(
            f"joint attention runs at the video width; need C_v >= C_a, got C_v={c_v}, C_a={c_a}"
        )


def new_parameter_count(c_v: int, c_a: int, n_joint_blocks: int) -> int:
    """Parameters added by the width adapters of ``n_joint_blocks`` joint blocks."""
    check_widths(c_v, c_a)
    return n_joint_blocks * 4 * c_a * (c_v - c_a)


def project_video_qkv(h_v: Tensor, w: BlockWeights) -> tuple[Tensor, Tensor, Tensor]:
    if h_v.shape[-1] != w.width:
        raise ShapeError(f"video hidden width {h_v.shape[-1]} != projection width {w.width}")
    return T.matmul(h_v, w.wq), T.matmul(h_v, w.wk), T.matmul(h_v, w.wv)


def _widen(pretrained: Tensor, adapter: Tensor | None) -> Tensor:
    return pretrained if adapter is None else T.concat([pretrained, adapter], axis=1)


def project_audio_qkv_expanded(
    h_a: Tensor, w: BlockWeights, adapters: AdapterWeights | None
) -> tuple[Tensor, Tensor, Tensor]:
    """``h_a @ [W_a ; W_an]`` for query, key and value; output width C_v."""
    if h_a.shape[-1] != w.width:
        raise ShapeError(f"audio hidden width {h_a.shape[-1]} != projection width {w.width}")
    if adapters is None:
        return T.matmul(h_a, w.wq), T.matmul(h_a, w.wk), T.matmul(h_a, w.wv)
    return (
        T.matmul(h_a, _widen(w.wq, adapters.wq_an)),
        T.matmul(h_a, _widen(w.wk, adapters.wk_an)),
        T.matmul(h_a, _widen(w.wv, adapters.wv_an)),
    )


def audio_output_matrix(w: BlockWeights, adapters: AdapterWeights | None) -> Tensor:
    """Row-stacked ``[W^o_a ; W^o_an]`` mapping C_v back to C_a."""
    return w.wo if adapters is None else T.concat([w.wo, adapters.wo_an], axis=0)


def cross_modal_mask(l_first: int, l_second: int) -> np.ndarray:
    n = l_first + l_second
    mask = np.full((n, n), MASK_VALUE)
    mask[:l_first, :l_first] = 0.0
    mask[l_first:, l_first:] = 0.0
    return mask


def avfull_attention(
    h_v: Tensor,
    h_a: Tensor,
    w: JointBlockWeights,
    positions_v,
    positions_a,
    rope_cfg: RopeConfig | None,
    heads: int,
    mask_cross: bool = False,
    order: str = "va",
) -> tuple[Tensor, Tensor]:
    """One multi-head self-attention over the concatenated video and audio tokens.

    Returns ``(o_v, o_a)`` with widths C_v and C_a.  ``mask_cross`` drives the
    audio<->video logits to a large negative value, which decouples the
    modalities; ``order`` picks which modality comes first in the sequence.
    """
    if h_v.shape[0] != h_a.shape[0]:
        raise ShapeError(f"batch sizes differ: video {h_v.shape}, audio {h_a.shape}")
    l_v, l_a = h_v.shape[1], h_a.shape[1]
    if l_v < 1 or l_a < 1:
        raise ShapeError("both token sequences must be non-empty")
    qv, kv, vv = (split_heads(x, heads) for x in project_video_qkv(h_v, w.video))
    qa, ka, va = (split_heads(x, heads) for x in project_audio_qkv_expanded(h_a, w.audio, w.adapters))
    if rope_cfg is not None:
        qv, kv = apply_rope(qv, positions_v, rope_cfg), apply_rope(kv, positions_v, rope_cfg)
        qa, ka = apply_rope(qa, positions_a, rope_cfg), apply_rope(ka, positions_a, rope_cfg)

    if order == "va":
        parts, sizes = [(qv, kv, vv), (qa, ka, va)], [l_v, l_a]
    elif order == "av":
        parts, sizes = [(qa, ka, va), (qv, kv, vv)], [l_a, l_v]
    else:
        raise ValueError(f"order must be 'va' or 'av', got {order!r}")
    q = T.concat([p[0] for p in parts], axis=1)
    k = T.concat([p[1] for p in parts], axis=1)
    v = T.concat([p[2] for p in parts], axis=1)
    mask = cross_modal_mask(*sizes) if mask_cross else None
    attended = merge_heads(attend(heads_first(q), heads_first(k), heads_first(v), mask))
    first, second = T.split(attended, sizes, axis=1)
    a_v, a_a = (first, second) if order == "va" else (second, first)

    o_v = T.matmul(a_v, w.video.wo)
    o_a = T.matmul(a_a, audio_output_matrix(w.audio, w.adapters))
    return o_v, o_a


def _fixed_norm(x: Tensor) -> Tensor:
    c = x.shape[-1]
    return T.layer_norm(x, T.constant(np.ones(c)), T.constant(np.zeros(c)))


def cross_attention_baseline(
    h_v: Tensor,
    h_a: Tensor,
    w: CrossModalWeights,
    heads: int,
    positions_v=None,
    positions_a=None,
    rope_cfg: RopeConfig | None = None,
) -> tuple[Tensor, Tensor]:
    """Video queries attend to audio keys/values and vice versa.

    Both directions run at width C_v.  Outputs are ungated; the block applies
    ``v_gate``/``a_gate``.
    """
    xv, xa = _fixed_norm(h_v), _fixed_norm(h_a)
    qv = split_heads(T.matmul(xv, w.vq), heads)
    ka = split_heads(T.matmul(xa, w.vk), heads)
    va = split_heads(T.matmul(xa, w.vv), heads)
    qa = split_heads(T.matmul(xa, w.aq), heads)
    kv = split_heads(T.matmul(xv, w.ak), heads)
    vv = split_heads(T.matmul(xv, w.av), heads)
    if rope_cfg is not None:
        qv, kv = apply_rope(qv, positions_v, rope_cfg), apply_rope(kv, positions_v, rope_cfg)
        qa, ka = apply_rope(qa, positions_a, rope_cfg), apply_rope(ka, positions_a, rope_cfg)
    o_v = T.matmul(merge_heads(attend(heads_first(qv), heads_first(ka), heads_first(va))), w.vo)
    o_a = T.matmul(merge_heads(attend(heads_first(qa), heads_first(kv), heads_first(vv))), w.ao)
    return o_v, o_a


def joint_block(
    h_v: Tensor,
    h_a: Tensor,
    cond_v: Tensor,
    cond_a: Tensor,
    temb_v: Tensor,
    temb_a: Tensor,
    w: JointBlockWeights,
    positions_v,
    positions_a,
    rope_joint: RopeConfig | None,
    rope_audio: RopeConfig | None,
    heads_v: int,
    heads_a: int,
    mask_cross: bool = False,
) -> tuple[Tensor, Tensor]:
    """One audio-video block; self-attention replaced, cross-attention and FFN unimodal."""
    mods_v = block_modulation(temb_v, w.video)
    mods_a = block_modulation(temb_a, w.audio)
    x_v = attention_input(h_v, mods_v, w.video)
    x_a = attention_input(h_a, mods_a, w.audio)
    if w.cross is None:
        o_v, o_a = avfull_attention(x_v, x_a, w, positions_v, positions_a, rope_joint, heads_v, mask_cross)
        h_v = T.add(h_v, T.mul(mods_v["gate_sa"], o_v))
        h_a = T.add(h_a, T.mul(mods_a["gate_sa"], o_a))
    else:
        h_v = T.add(h_v, T.mul(mods_v["gate_sa"], self_attention(x_v, w.video, positions_v, rope_joint, heads_v)))
        h_a = T.add(h_a, T.mul(mods_a["gate_sa"], self_attention(x_a, w.audio, positions_a, rope_audio, heads_a)))
        if not mask_cross:
            c_v, c_a = cross_attention_baseline(h_v, h_a, w.cross, heads_v, positions_v, positions_a, rope_joint)
            h_v = T.add(h_v, T.mul(w.cross.v_gate, c_v))
            h_a = T.add(h_a, T.mul(w.cross.a_gate, c_a))
    h_v = finish_block(h_v, cond_v, mods_v, w.video, heads_v)
    h_a = finish_block(h_a, cond_a, mods_a, w.audio, heads_a)
    return h_v, h_a
