"""Exact proxies for motion, floor contact and audio/video synchrony.

Every metric decodes latents back to occupancy frames and energy features
first, so the scores do not depend on the encoder basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import canonical
from .rope import SyncSpec
from .synthworld import HEIGHT_CELLS, FEATURES_PER_FRAME, LatentClip, decode_audio, decode_video, occupancy

DEFAULT_SYNC = SyncSpec(0.25, 0.0625)
CONTACT_THRESHOLD = 0.1
MIN_RISE = 0.05
SILENCE_ENERGY = FEATURES_PER_FRAME * 0.01 ** 2
MAX_LAG_SECONDS = 0.5
SMOOTHING = np.array([0.5, 1.0, 0.5])  # spreads each onset over its neighbouring frames
# norm of one unblurred ball profile away from the edges
REFERENCE_NORM = float(np.linalg.norm(occupancy(np.array(HEIGHT_CELLS // 2 * 0.1))))

METRICS = (
    "motion_magnitude", "motion_deviation", "contact_score", "sync_offset", "sync_abs_offset",
    "val_loss_v", "val_loss_a",
)


REPORT_HEADER = "subset|metric|n|mean|std"


class PairingError(ValueError):
    pass


@dataclass
class ClipScores:
    motion_magnitude: float
    contact_score: float
    sync_offset: float | None = None
    motion_deviation: float | None = None
    val_loss_v: float | None = None
    val_loss_a: float | None = None

    @property
    def sync_abs_offset(self) -> float | None:
        return None if self.sync_offset is None else abs(self.sync_offset)

    def get(self, metric: str):
        return getattr(self, metric)


def _raw_per_latent(sync: SyncSpec, n_latent: int, n_raw: int) -> int:
    if n_raw % n_latent:
        raise ValueError("decoded frames do not tile the latent frames")
    return n_raw // n_latent


def motion_magnitude(video_latents: np.ndarray) -> float:
    """Mean L2 distance between consecutive decoded frames, in units of one ball profile."""
    video_latents = np.asarray(video_latents)
    if video_latents.ndim != 2 or video_latents.shape[0] < 2:
        raise ValueError("motion needs at least two latent frames")
    frames = decode_video(video_latents)
    return float(np.mean(np.linalg.norm(np.diff(frames, axis=0), axis=1)) / REFERENCE_NORM)


def floor_track(video_latents: np.ndarray) -> np.ndarray:
    """Floor-cell occupancy of each decoded raw frame."""
    return decode_video(video_latents)[:, 0]


def contact_frames(video_latents: np.ndarray) -> np.ndarray:
    """Boolean per latent frame: does any of its raw frames touch the floor cell?"""
    n = np.asarray(video_latents).shape[0]
    floor = floor_track(video_latents)
    return floor.reshape(n, -1).max(axis=1) > CONTACT_THRESHOLD


def contact_score(video_latents: np.ndarray, events: Sequence[float], sync: SyncSpec = DEFAULT_SYNC) -> float:
    """Fraction of expected impacts with floor contact within one latent frame.

    With no expected impacts the score is 1.0 if the ball never touches the
    floor and 0.0 otherwise.
    """
    touching = contact_frames(video_latents)
    if not len(events):
        return 0.0 if touching.any() else 1.0
    n = len(touching)
    hits = 0
    for t in events:
        i = min(int(math.floor(t / sync.delta_t_video)), n - 1)
        if touching[max(i - 1, 0): i + 2].any():
            hits += 1
    return hits / len(events)


def video_impulses(video_latents: np.ndarray, sync: SyncSpec = DEFAULT_SYNC) -> np.ndarray:
    """Binary contact onsets (rising floor occupancy above threshold) held at the audio latent rate."""
    n_latent = np.asarray(video_latents).shape[0]
    floor = floor_track(video_latents)
    per = _raw_per_latent(sync, n_latent, len(floor))
    rise = ((np.diff(floor, prepend=0.0) > MIN_RISE) & (floor > CONTACT_THRESHOLD)).astype(np.float64)
    hold = sync.delta_t_video / per / sync.delta_t_audio
    if abs(hold - round(hold)) > 1e-9 or round(hold) < 1:
        raise ValueError(f"raw video frame is not a whole number of audio frames ({hold})")
    return np.repeat(rise, round(hold))


def audio_energy(audio_latents: np.ndarray) -> np.ndarray:
    return np.sum(decode_audio(audio_latents) ** 2, axis=1)


def audio_onsets(energy: np.ndarray) -> np.ndarray:
    """Binary frames where audible energy rises."""
    return ((np.diff(energy, prepend=0.0) > SILENCE_ENERGY) & (energy > SILENCE_ENERGY)).astype(np.float64)


def best_lag(a: np.ndarray, b: np.ndarray, max_lag: int) -> int:
    """Lag ``L`` maximising ``sum_i a[i] b[i + L]`` after mean removal; ties go to the smallest |L|."""
    a = a - a.mean()
    b = b - b.mean()
    n = len(a)
    lags = sorted(range(-max_lag, max_lag + 1), key=lambda L: (abs(L), L))
    scores = []
    for L in lags:
        if L >= 0:
            scores.append(float(np.dot(a[: n - L], b[L:])))
        else:
            scores.append(float(np.dot(a[-L:], b[: n + L])))
    top = max(scores)
    tol = 1e-12 * max(abs(top), 1e-300)
    for L, s in zip(lags, scores):
        if s >= top - tol:
            return L
    raise AssertionError("unreachable")


def sync_offset(video_latents: np.ndarray, audio_latents: np.ndarray, sync: SyncSpec = DEFAULT_SYNC) -> float | None:
    """Audio delay relative to visible contact in seconds; ``None`` when either track is degenerate."""
    impulses = video_impulses(video_latents, sync)
    energy = audio_energy(audio_latents)
    if len(impulses) != len(energy):
        raise ValueError(f"video track covers {len(impulses)} audio frames, audio has {len(energy)}")
    onsets = audio_onsets(energy)
    if not impulses.any() or not onsets.any() or impulses.all() or onsets.all():
        return None
    max_lag = min(len(energy) - 1, int(round(MAX_LAG_SECONDS / sync.delta_t_audio)))
    a = np.convolve(impulses, SMOOTHING, mode="same")
    b = np.convolve(onsets, SMOOTHING, mode="same")
    return best_lag(a, b, max_lag) * sync.delta_t_audio


def score_clip(video_latents, audio_latents, reference: LatentClip) -> ClipScores:
    motion = motion_magnitude(video_latents)
    scores = ClipScores(
        motion_magnitude=motion,
        contact_score=contact_score(video_latents, reference.events, reference.sync),
        motion_deviation=abs(motion - motion_magnitude(reference.video)),
    )
    if audio_latents is not None:
        scores.sync_offset = sync_offset(video_latents, audio_latents, reference.sync)
    return scores


# ---------------------------------------------------------------- reporting


@dataclass(frozen=True)
class Row:
    subset: str
    metric: str
    n: int
    mean: float
    std: float

    def format(self) -> str:
        return f"{self.subset}|{self.metric}|{self.n}|{self.mean!r}|{self.std!r}"


def summarize(values: Sequence[float]) -> tuple[int, float, float]:
    vals = [float(v) for v in values if v is not None and not math.isnan(v)]
    if not vals:
        return 0, float("nan"), float("nan")
    n = len(vals)
    mean = math.fsum(vals) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / n)
    return n, mean, std


def subsets_of(clips: Sequence[LatentClip]) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {"all": list(range(len(clips)))}
    for i, c in enumerate(clips):
        groups.setdefault(c.category, []).append(i)
        if c.corrupted:
            groups.setdefault("corrupted", []).append(i)
    return groups


def score_set(outputs: Sequence[tuple], clips: Sequence[LatentClip],
              val_losses: Sequence[tuple[float, float]] | None = None) -> list[Row]:
    """Aggregate per-clip scores into ``all``, per-scenario and ``corrupted`` rows.

    ``outputs[i]`` is ``(video_latents, audio_latents or None)`` generated for ``clips[i]``.
    """
    if len(outputs) != len(clips):
        raise PairingError(f"{len(outputs)} outputs for {len(clips)} clips")
    if val_losses is not None and len(val_losses) != len(clips):
        raise PairingError(f"{len(val_losses)} validation losses for {len(clips)} clips")
    per_clip = []
    for i, ((v, a), clip) in enumerate(zip(outputs, clips)):
        if np.shape(v) != clip.video.shape or (a is not None and np.shape(a) != clip.audio.shape):
            raise PairingError(f"output {i} does not match the shape of clip {clip.clip_id}")
        s = score_clip(v, a, clip)
        if val_losses is not None:
            s.val_loss_v, s.val_loss_a = val_losses[i]
        per_clip.append(s)
    rows = []
    for subset, idx in subsets_of(clips).items():
        for metric in METRICS:
            n, mean, std = summarize([per_clip[i].get(metric) for i in idx])
            rows.append(Row(subset, metric, n, mean, std))
    return rows


def format_report(rows: Sequence[Row]) -> str:
    return REPORT_HEADER + "\n" + "".join(r.format() + "\n" for r in rows)


def parse_report(text: str) -> list[Row]:
    rows = []
    for line in text.splitlines():
        if line.strip() and not line.startswith("#") and line != REPORT_HEADER:
            s, m, n, mean, std = line.split("|")
            rows.append(Row(s, m, int(n), float(mean), float(std)))
    return rows


def summary_items(rows: Sequence[Row], prefix: str = "") -> dict[str, object]:
    out: dict[str, object] = {}
    for r in rows:
        key = f"{prefix}{r.subset}.{r.metric}"
        out[f"{key}.n"] = r.n
        out[f"{key}.mean"] = r.mean
        out[f"{key}.std"] = r.std
    return out


def summary_text(rows: Sequence[Row], prefix: str = "") -> str:
    return canonical.emit(summary_items(rows, prefix))


def lookup(rows: Sequence[Row], subset: str, metric: str) -> Row | None:
    for r in rows:
        if r.subset == subset and r.metric == metric:
            return r
    return None

