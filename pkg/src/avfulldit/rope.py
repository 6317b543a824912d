"""Temporal rotary position encoding with audio/video time alignment.

Video tokens use integer frame indices.  Audio latent frames are shorter
than video latent frames by a factor ``tau = dt_video / dt_audio``; the
``shrink_audio`` variant divides audio indices by ``tau`` so that a video
token at index ``p`` and the audio token at index ``tau * p`` receive the
same rotation.  ``expand_video`` does the mirror operation on video indices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, rope_rotate

VARIANTS = ("vanilla", "shrink_audio", "expand_video")


@dataclass(frozen=True)
class SyncSpec:
    delta_t_video: float
    delta_t_audio: float

    def __post_init__(self):
        if not (self.delta_t_video > 0 and self.delta_t_audio > 0):
            raise ValueError(f"latent frame durations must be positive, got {self}")

    @property
    def tau(self) -> float:
        return self.delta_t_video / self.delta_t_audio


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    variant: str = "shrink_audio"

    def __post_init__(self):
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown RoPE variant {self.variant!r}; expected one of {VARIANTS}")


def rope_phase(position, cfg: RopeConfig) -> np.ndarray:
    """Rotation angles ``position / base**(2i/head_dim)`` for i < head_dim/2.

    ``position`` may be a scalar or an array; the angle axis is appended.
    """
    position = np.asarray(position, dtype=np.float64)
    denom = cfg.base ** (np.arange(0, cfg.head_dim, 2, dtype=np.float64) / cfg.head_dim)
    return position[..., None] / denom


def apply_rope(tokens: Tensor, positions, cfg: RopeConfig) -> Tensor:
    """Rotate ``tokens[..., L, heads, head_dim]`` by per-token phases."""
    positions = np.asarray(positions, dtype=np.float64)
    if tokens.ndim < 3 or positions.shape != (tokens.shape[-3],):
        raise ShapeError(f"apply_rope: {positions.shape[0] if positions.ndim else 0} positions "
                         f"for token tensor of shape {tokens.shape}")
    if tokens.shape[-1] != cfg.head_dim:
        raise ShapeError(f"apply_rope: head_dim {cfg.head_dim} does not match tokens {tokens.shape}")
    return rope_rotate(tokens, rope_phase(positions, cfg))


def video_positions(num_latent_frames: int, tau: float = 1.0, variant: str = "shrink_audio") -> np.ndarray:
    if num_latent_frames < 1:
        raise ValueError("need at least one video latent frame")
    p = np.arange(num_latent_frames, dtype=np.float64)
    return p * tau if variant == "expand_video" else p


def audio_positions(num_latent_frames: int, sync: SyncSpec, variant: str = "shrink_audio") -> np.ndarray:
    if num_latent_frames < 1:
        raise ValueError("need at least one audio latent frame")
    p = np.arange(num_latent_frames, dtype=np.float64)
    return p / sync.tau if variant == "shrink_audio" else p
