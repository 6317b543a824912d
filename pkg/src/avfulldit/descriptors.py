"""Closed descriptor vocabularies standing in for video and audio captions.

Index 0 of each vocabulary is the null symbol used for negative (unconditional)
guidance branches.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

NULL = "<null>"

VIDEO_VOCAB = (
    NULL,
    "scene:bouncing_ball",
    "scene:silent_drift",
    "scene:ambient_only",
    "height:low",
    "height:mid",
    "height:high",
    "contact:yes",
    "contact:no",
)

AUDIO_VOCAB = (
    NULL,
    "clicks:yes",
    "clicks:no",
    "count:0",
    "count:1-2",
    "count:3-4",
    "count:5+",
    "bed:quiet",
    "bed:noise",
)

VIDEO_DESC_LEN = 3
AUDIO_DESC_LEN = 3


class UnknownDescriptor(KeyError):
    pass


def encode(symbols: Sequence[str], vocab: Sequence[str]) -> np.ndarray:
    index = {s: i for i, s in enumerate(vocab)}
    missing = [s for s in symbols if s not in index]
    if missing:
        raise UnknownDescriptor(f"symbols not in vocabulary: {missing}")
    return np.array([index[s] for s in symbols], dtype=np.int64)


def encode_video(symbols: Sequence[str]) -> np.ndarray:
    if len(symbols) != VIDEO_DESC_LEN:
        raise ValueError(f"video descriptor needs {VIDEO_DESC_LEN} symbols, got {list(symbols)}")
    return encode(symbols, VIDEO_VOCAB)


def encode_audio(symbols: Sequence[str]) -> np.ndarray:
    if len(symbols) != AUDIO_DESC_LEN:
        raise ValueError(f"audio descriptor needs {AUDIO_DESC_LEN} symbols, got {list(symbols)}")
    return encode(symbols, AUDIO_VOCAB)


def null_ids(length: int) -> np.ndarray:
    return np.zeros(length, dtype=np.int64)


def height_bucket(height: float) -> str:
    if height < 0.8:
        return "height:low"
    if height < 1.2:
        return "height:mid"
    return "height:high"


def count_bucket(n: int) -> str:
    if n == 0:
        return "count:0"
    if n <= 2:
        return "count:1-2"
    if n <= 4:
        return "count:3-4"
    return "count:5+"
