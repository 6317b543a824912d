"""Unimodal DiT blocks: RoPE self-attention, condition cross-attention, FFN.

Each sub-layer is pre-norm and wrapped in adaLN-style timestep modulation
(shift, scale, gate), so a block with all gates at zero is the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .rope import RopeConfig, apply_rope
from .tensor import ShapeError, Tensor

# modulation chunk order, each of width C
MOD_CHUNKS = (
    "shift_sa", "scale_sa", "gate_sa",
    "shift_ca", "scale_ca", "gate_ca",
    "shift_ff", "scale_ff", "gate_ff",
)
FFN_MULT = 4
MASK_VALUE = -1e9


@dataclass
class BlockWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    cq: Tensor
    ck: Tensor
    cv: Tensor
    co: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    n1_g: Tensor
    n1_b: Tensor
    n2_g: Tensor
    n2_b: Tensor
    n3_g: Tensor
    n3_b: Tensor
    mod_w: Tensor
    mod_b: Tensor

    @property
    def width(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def from_params(cls, params: dict[str, Tensor], prefix: str) -> "BlockWeights":
        return cls(**{f.name: params[f"{prefix}.{f.name}"] for f in fields(cls)})

    @staticmethod
    def shapes(c: int, c_text: int) -> dict[str, tuple[int, ...]]:
        h = FFN_MULT * c
        return {
            "wq": (c, c), "wk": (c, c), "wv": (c, c), "wo": (c, c),
            "cq": (c, c), "ck": (c_text, c), "cv": (c_text, c), "co": (c, c),
            "w1": (c, h), "b1": (h,), "w2": (h, c), "b2": (c,),
            "n1_g": (c,), "n1_b": (c,), "n2_g": (c,), "n2_b": (c,), "n3_g": (c,), "n3_b": (c,),
            "mod_w": (c, len(MOD_CHUNKS) * c), "mod_b": (len(MOD_CHUNKS) * c,),
        }


def init_block(rng: np.random.Generator, c: int, c_text: int, gate_bias: float = 1.0) -> dict[str, np.ndarray]:
    """Random donor-style initialisation (the stand-in for pre-trained weights)."""
    out = {}
    for name, shape in BlockWeights.shapes(c, c_text).items():
        if name.startswith("n") and name.endswith("_g"):
            out[name] = np.ones(shape)
        elif len(shape) == 1:
            out[name] = np.zeros(shape)
        elif name == "mod_w":
            out[name] = rng.normal(0.0, 0.1 / math.sqrt(shape[0]), size=shape)
        else:
            out[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
    for i, chunk in enumerate(MOD_CHUNKS):
        if chunk.startswith("gate"):
            out["mod_b"][i * c:(i + 1) * c] = gate_bias
    return out


# ----------------------------------------------------------------- attention


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, L, C] -> [B, L, heads, C/heads]."""
    b, l, c = x.shape
    if c % heads:
        raise ShapeError(f"width {c} is not divisible by {heads} heads")
    return T.reshape(x, (b, l, heads, c // heads))


def merge_heads(x: Tensor) -> Tensor:
    """[B, heads, L, D] -> [B, L, heads*D]."""
    b, h, l, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * d))


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention over [B, H, L, D] tensors."""
    d = q.shape[-1]
    logits = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    if mask is not None:
        logits = T.add(logits, T.constant(mask))
    return T.matmul(T.softmax(logits, axis=-1), v)


def heads_first(x: Tensor) -> Tensor:
    return T.transpose(x, (0, 2, 1, 3))


def self_attention(h: Tensor, w: BlockWeights, positions, rope_cfg: RopeConfig | None, heads: int) -> Tensor:
    """Multi-head self-attention with RoPE on queries and keys.

    ``h`` is [B, L, C].  The residual connection is the caller's job.
    """
    if h.ndim != 3 or h.shape[-1] != w.width:
        raise ShapeError(f"self_attention: hidden {h.shape} does not match width {w.width}")
    q = split_heads(T.matmul(h, w.wq), heads)
    k = split_heads(T.matmul(h, w.wk), heads)
    v = split_heads(T.matmul(h, w.wv), heads)
    if rope_cfg is not None:
        q = apply_rope(q, positions, rope_cfg)
        k = apply_rope(k, positions, rope_cfg)
    out = attend(heads_first(q), heads_first(k), heads_first(v))
    return T.matmul(merge_heads(out), w.wo)


def cross_attention(h: Tensor, cond: Tensor, w: BlockWeights, heads: int) -> Tensor:
    """Queries from ``h`` [B, L, C], keys/values from condition tokens [B, Lc, C_text]."""
    if cond.ndim != 3 or cond.shape[1] < 1:
        raise ShapeError(f"cross_attention: condition tokens must be [B, Lc>=1, C_text], got {cond.shape}")
    if cond.shape[-1] != w.ck.shape[0]:
        raise ShapeError(f"cross_attention: condition width {cond.shape[-1]} != {w.ck.shape[0]}")
    q = heads_first(split_heads(T.matmul(h, w.cq), heads))
    k = heads_first(split_heads(T.matmul(cond, w.ck), heads))
    v = heads_first(split_heads(T.matmul(cond, w.cv), heads))
    return T.matmul(merge_heads(attend(q, k, v)), w.co)


def ffn(h: Tensor, w: BlockWeights) -> Tensor:
    return T.add(T.matmul(T.silu(T.add(T.matmul(h, w.w1), w.b1)), w.w2), w.b2)


# ---------------------------------------------------------------- modulation


def timestep_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t * 1000`` (t in [0, 1]), shape [B, dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"timesteps must lie in [0, 1], got {t}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def timestep_embedding(t, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    feats = T.constant(timestep_features(t, w1.shape[0]))
    return T.add(T.matmul(T.silu(T.add(T.matmul(feats, w1), b1)), w2), b2)


def modulation(temb: Tensor, mod_w: Tensor, mod_b: Tensor, n_chunks: int) -> list[Tensor]:
    """Project the timestep embedding [B, C] into ``n_chunks`` tensors [B, 1, C]."""
    m = T.add(T.matmul(T.silu(temb), mod_w), mod_b)
    b = m.shape[0]
    c = m.shape[1] // n_chunks
    return T.split(T.reshape(m, (b, 1, n_chunks * c)), [c] * n_chunks, axis=-1)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return T.add(T.mul(x, T.add(scale, 1.0)), shift)


def block_modulation(temb: Tensor, w: BlockWeights) -> dict[str, Tensor]:
    return dict(zip(MOD_CHUNKS, modulation(temb, w.mod_w, w.mod_b, len(MOD_CHUNKS))))


def attention_input(h: Tensor, mods: dict[str, Tensor], w: BlockWeights) -> Tensor:
    return modulate(T.layer_norm(h, w.n1_g, w.n1_b), mods["shift_sa"], mods["scale_sa"])


def finish_block(h: Tensor, cond: Tensor, mods: dict[str, Tensor], w: BlockWeights, heads: int) -> Tensor:
    """Condition cross-attention and FFN sub-layers, both gated residuals."""
    x = modulate(T.layer_norm(h, w.n2_g, w.n2_b), mods["shift_ca"], mods["scale_ca"])
    h = T.add(h, T.mul(mods["gate_ca"], cross_attention(x, cond, w, heads)))
    x = modulate(T.layer_norm(h, w.n3_g, w.n3_b), mods["shift_ff"], mods["scale_ff"])
    return T.add(h, T.mul(mods["gate_ff"], ffn(x, w)))


def unimodal_block(
    h: Tensor,
    cond: Tensor,
    temb: Tensor,
    w: BlockWeights,
    positions,
    rope_cfg: RopeConfig | None,
    heads: int,
) -> Tensor:
    mods = block_modulation(temb, w)
    attn = self_attention(attention_input(h, mods, w), w, positions, rope_cfg, heads)
    h = T.add(h, T.mul(mods["gate_sa"], attn))
    return finish_block(h, cond, mods, w, heads)
