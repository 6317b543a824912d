"""A small world in which every sound is caused by a visible event.

A point ball moves vertically above a floor.  Video frames are vertical
occupancy profiles (``HEIGHT_CELLS`` cells, cell 0 is the floor); audio is a
waveform with a decaying click at every floor impact.  Fixed orthogonal
linear maps play the role of frozen encoders and have exact inverses.

Scenarios
---------
bouncing_ball  dropped from rest, bounces with restitution ``e`` until the
               rebound apex drops below ``REST_APEX``; one click per impact.
silent_drift   glides at least ``DRIFT_FLOOR`` metres above the floor, near-silent.
ambient_only   static ball at mid height, broadband noise audio.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import container
from .descriptors import count_bucket, encode_audio as ids_audio, encode_video as ids_video, height_bucket
from .rope import SyncSpec

SCENARIOS = ("bouncing_ball", "silent_drift", "ambient_only")

HEIGHT_CELLS = 16
CELL_SIZE = 0.1  # metres per cell; cell c is centred at c * CELL_SIZE
BLUR_SIGMA = 0.8  # cells
SUBSAMPLES = 16  # motion-blur samples per raw video frame
FRAME_WIDTH = 32  # nominal raster width reported in manifests

REST_APEX = 0.05
DRIFT_FLOOR = 0.3
CLICK_FREQ = 300.0
CLICK_DECAY = 0.01
FEATURES_PER_FRAME = 8
DRIFT_NOISE = 0.002
AMBIENT_NOISE = 0.1

MAX_HEIGHT = 1.5
HEIGHT_RANGE = (0.5, 1.5)
ELASTICITY_RANGE = (0.5, 0.85)

VIDEO_SCALE = 3.0
AUDIO_SCALE = 8.0


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ClipSpec:
    seed: int
    scenario: str = "bouncing_ball"
    height: float = 1.0
    elasticity: float = 0.7
    gravity: float = 9.81
    duration: float = 2.0
    fps: int = 8
    video_factor: int = 2
    audio_rate: int = 16
    sample_rate: int = 2048

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise SpecError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if min(self.duration, self.fps, self.video_factor, self.audio_rate, self.sample_rate, self.gravity) <= 0:
            raise SpecError(f"durations, rates and gravity must be positive: {self}")
        if not 0.0 <= self.height <= MAX_HEIGHT:
            raise SpecError(f"height {self.height} outside [0, {MAX_HEIGHT}]")
        if not 0.0 <= self.elasticity < 1.0:
            raise SpecError(f"elasticity {self.elasticity} outside [0, 1)")
        if self.sample_rate % (self.audio_rate * FEATURES_PER_FRAME):
            raise SpecError("sample_rate must be a multiple of audio_rate * FEATURES_PER_FRAME")
        for rate, name in ((self.fps / self.video_factor, "video"), (self.audio_rate, "audio")):
            frames = self.duration * rate
            if abs(frames - round(frames)) > 1e-9:
                raise SpecError(f"duration {self.duration} is not a whole number of {name} latent frames")
        if self.scenario == "silent_drift" and self.height < DRIFT_FLOOR:
            raise SpecError(f"silent_drift needs height >= {DRIFT_FLOOR}")

    @property
    def sync(self) -> SyncSpec:
        return SyncSpec(self.video_factor / self.fps, 1.0 / self.audio_rate)

    @property
    def n_raw_frames(self) -> int:
        return round(self.duration * self.fps)

    @property
    def n_audio_frames(self) -> int:
        return round(self.duration * self.audio_rate)

    @classmethod
    def random(cls, seed: int, scenario: str, **overrides) -> "ClipSpec":
        rng = np.random.default_rng([seed, 101])
        if scenario == "bouncing_ball":
            h = rng.uniform(*HEIGHT_RANGE)
        elif scenario == "silent_drift":
            h = rng.uniform(0.6, 1.2)
        else:
            h = rng.uniform(0.4, 1.2)
        return cls(seed=seed, scenario=scenario, height=float(h),
                   elasticity=float(rng.uniform(*ELASTICITY_RANGE)), **overrides)


@dataclass
class LatentClip:
    clip_id: int
    video: np.ndarray
    audio: np.ndarray
    c_v: tuple[str, ...]
    c_a: tuple[str, ...]
    sync: SyncSpec
    events: tuple[float, ...]
    category: str
    corrupted: bool = False
    volume: float = 0.0

    @property
    def duration(self) -> float:
        return self.video.shape[0] * self.sync.delta_t_video

    def c_v_ids(self) -> np.ndarray:
        return ids_video(self.c_v)

    def c_a_ids(self) -> np.ndarray:
        return ids_audio(self.c_a)


# ------------------------------------------------------------------ physics


def bounce_times(height: float, elasticity: float, gravity: float, duration: float) -> list[float]:
    """Impact times from an event-driven simulation of a ball dropped from rest."""
    if height <= 0:
        return []
    t = math.sqrt(2 * height / gravity)
    v = gravity * t
    times = []
    while t <= duration:
        times.append(t)
        v *= elasticity
        if v * v / (2 * gravity) < REST_APEX:
            break
        t += 2 * v / gravity
    return times


def ball_height(spec: ClipSpec, t: np.ndarray) -> np.ndarray:
    """Ball height (metres) at times ``t``."""
    t = np.asarray(t, dtype=np.float64)
    if spec.scenario == "ambient_only":
        return np.full_like(t, spec.height)
    if spec.scenario == "silent_drift":
        rng = np.random.default_rng([spec.seed, 202])
        drift = rng.uniform(-0.15, 0.15)
        wobble = rng.uniform(0.02, 0.08)
        y = spec.height + drift * t + wobble * np.sin(2 * np.pi * t / spec.duration)
        return np.maximum(y, DRIFT_FLOOR)
    g = spec.gravity
    impacts = bounce_times(spec.height, spec.elasticity, g, math.inf)
    y = np.zeros_like(t)
    if not impacts:
        return y
    # free fall before the first impact
    first = t < impacts[0]
    y[first] = spec.height - 0.5 * g * t[first] ** 2
    v = g * impacts[0]
    for k, tk in enumerate(impacts):
        if k + 1 == len(impacts):
            break  # at rest from the final impact on
        v_up = v * spec.elasticity
        end = impacts[k + 1]
        seg = (t >= tk) & (t < end)
        dt = t[seg] - tk
        y[seg] = v_up * dt - 0.5 * g * dt ** 2
        v = v_up
    return np.maximum(y, 0.0)


# ---------------------------------------------------------------- rendering


def occupancy(y_metres: np.ndarray) -> np.ndarray:
    """Gaussian occupancy profile over the height cells for each position."""
    cells = np.arange(HEIGHT_CELLS, dtype=np.float64)
    pos = np.asarray(y_metres, dtype=np.float64)[..., None] / CELL_SIZE
    return np.exp(-0.5 * ((cells - pos) / BLUR_SIGMA) ** 2)


def render_video(position: Callable[[np.ndarray], np.ndarray], n_frames: int, fps: float) -> np.ndarray:
    """Motion-blurred frames ``[n_frames, HEIGHT_CELLS]`` from a height trajectory in metres."""
    offsets = (np.arange(SUBSAMPLES) + 0.5) / SUBSAMPLES
    times = (np.arange(n_frames)[:, None] + offsets[None, :]) / fps
    return occupancy(position(times)).mean(axis=1)


def render_audio(spec: ClipSpec, events: Sequence[float], impact_speeds: Sequence[float]) -> np.ndarray:
    n = round(spec.duration * spec.sample_rate)
    t = np.arange(n) / spec.sample_rate
    wave = np.zeros(n)
    v_ref = math.sqrt(2 * spec.gravity * MAX_HEIGHT)
    for tk, vk in zip(events, impact_speeds):
        dt = t - tk
        on = dt >= 0
        wave[on] += (vk / v_ref) * np.exp(-dt[on] / CLICK_DECAY) * np.sin(2 * np.pi * CLICK_FREQ * dt[on])
    if spec.scenario != "bouncing_ball":
        rng = np.random.default_rng([spec.seed, 303])
        amp = AMBIENT_NOISE if spec.scenario == "ambient_only" else DRIFT_NOISE
        wave += amp * rng.standard_normal(n)
    return wave


def audio_features(wave: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """RMS energy of ``FEATURES_PER_FRAME`` sub-windows per audio latent frame."""
    per = spec.sample_rate // spec.audio_rate // FEATURES_PER_FRAME
    frames = wave[: spec.n_audio_frames * FEATURES_PER_FRAME * per]
    return np.sqrt(np.mean(frames.reshape(spec.n_audio_frames, FEATURES_PER_FRAME, per) ** 2, axis=-1))


# ------------------------------------------------------------------ encoders


def _orthogonal(n: int, seed: int) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, n)))
    return q * np.sign(np.diag(r))


VIDEO_BASIS = _orthogonal(2 * HEIGHT_CELLS, 4099)
AUDIO_BASIS = _orthogonal(FEATURES_PER_FRAME, 4111)


def encode_video(frames: np.ndarray, factor: int = 2) -> np.ndarray:
    """Raw frames ``[n, HEIGHT_CELLS]`` to latents ``[n / factor, factor * HEIGHT_CELLS]``."""
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    if n % factor or frames.shape[1:] != (HEIGHT_CELLS,):
        raise ValueError(f"frames of shape {frames.shape} do not tile into groups of {factor}")
    if factor * HEIGHT_CELLS != VIDEO_BASIS.shape[0]:
        raise ValueError(f"encoder is fixed at temporal factor {VIDEO_BASIS.shape[0] // HEIGHT_CELLS}")
    return VIDEO_SCALE * frames.reshape(n // factor, -1) @ VIDEO_BASIS.T


def decode_video(latents: np.ndarray) -> np.ndarray:
    latents = np.asarray(latents, dtype=np.float64)
    return (latents @ VIDEO_BASIS / VIDEO_SCALE).reshape(-1, HEIGHT_CELLS)


def encode_audio(features: np.ndarray) -> np.ndarray:
    return AUDIO_SCALE * np.asarray(features, dtype=np.float64) @ AUDIO_BASIS.T


def decode_audio(latents: np.ndarray) -> np.ndarray:
    return np.asarray(latents, dtype=np.float64) @ AUDIO_BASIS / AUDIO_SCALE


# --------------------------------------------------------------------- clips


def describe(spec: ClipSpec, n_events: int) -> tuple[tuple[str, ...], tuple[str, ...]]:
    c_v = (f"scene:{spec.scenario}", height_bucket(spec.height), "contact:yes" if n_events else "contact:no")
    bed = "bed:noise" if spec.scenario == "ambient_only" else "bed:quiet"
    c_a = ("clicks:yes" if n_events else "clicks:no", count_bucket(n_events), bed)
    return c_v, c_a


def generate_clip(spec: ClipSpec, clip_id: int | None = None) -> LatentClip:
    if spec.scenario == "bouncing_ball":
        events = bounce_times(spec.height, spec.elasticity, spec.gravity, spec.duration)
    else:
        events = []
    v0 = math.sqrt(2 * spec.gravity * spec.height)
    speeds = [v0 * spec.elasticity ** k for k in range(len(events))]
    frames = render_video(lambda t: ball_height(spec, t), spec.n_raw_frames, spec.fps)
    wave = render_audio(spec, events, speeds)
    c_v, c_a = describe(spec, len(events))
    return LatentClip(
        clip_id=spec.seed if clip_id is None else clip_id,
        video=encode_video(frames, spec.video_factor),
        audio=encode_audio(audio_features(wave, spec)),
        c_v=c_v,
        c_a=c_a,
        sync=spec.sync,
        events=tuple(events),
        category=spec.scenario,
        volume=float(np.sqrt(np.mean(wave ** 2))),
    )


def corrupt_video_descriptor(clip: LatentClip) -> LatentClip:
    """Flip the visible-contact flag to ``contact:no``; audio descriptors and events are kept."""
    if not clip.events:
        warnings.warn(f"clip {clip.clip_id} has no contact events; descriptor left unchanged", stacklevel=2)
        return clip
    c_v = tuple("contact:no" if s == "contact:yes" else s for s in clip.c_v)
    return replace(clip, c_v=c_v, corrupted=True)


# ------------------------------------------------------------------ manifest


@dataclass(frozen=True)
class ManifestRecord:
    clip_id: int
    group: str
    volume: float
    width: int
    height: int
    category: str

    def format(self) -> str:
        return f"{self.clip_id}|{self.group}|{self.volume!r}|{self.width}|{self.height}|{self.category}"

    @classmethod
    def parse(cls, line: str) -> "ManifestRecord":
        parts = line.strip().split("|")
        if len(parts) != 6:
            raise ValueError(f"manifest line needs 6 fields: {line!r}")
        cid, group, vol, w, h, cat = parts
        return cls(int(cid), group, float(vol), int(w), int(h), cat)


def volume_threshold(max_click_amplitude: float = 1.0) -> float:
    return 0.01 * max_click_amplitude


def filter_manifest(records: Sequence[ManifestRecord], threshold: float | None = None):
    """Returns ``(kept, dropped)`` with ``dropped`` a list of ``(record, reason)``.

    Rules apply in order: duplicate group, silence, portrait orientation.
    """
    threshold = volume_threshold() if threshold is None else threshold
    seen: set[str] = set()
    kept, dropped = [], []
    for rec in records:
        if rec.group in seen:
            dropped.append((rec, "duplicate"))
            continue
        seen.add(rec.group)
        if rec.volume < threshold:
            dropped.append((rec, "silent"))
        elif rec.height > rec.width:
            dropped.append((rec, "portrait"))
        else:
            kept.append(rec)
    return kept, dropped


def manifest_record(clip: LatentClip) -> ManifestRecord:
    return ManifestRecord(clip.clip_id, f"{clip.category}:{clip.clip_id}", clip.volume,
                          FRAME_WIDTH, HEIGHT_CELLS, clip.category)


# ------------------------------------------------------------------- dataset


def _normalise_mix(mix) -> dict[str, float]:
    if mix is None:
        mix = {s: 1.0 for s in SCENARIOS}
    mix = {k: float(v) for k, v in dict(mix).items() if float(v) > 0}
    unknown = set(mix) - set(SCENARIOS)
    if unknown or not mix:
        raise SpecError(f"bad scenario mix {mix}")
    total = sum(mix.values())
    return {s: mix[s] / total for s in SCENARIOS if s in mix}


def make_dataset(n_train: int, n_eval: int, seed: int, mix=None, corrupt_fraction: float = 0.0,
                 **spec_overrides) -> tuple[list[LatentClip], list[LatentClip]]:
    """Training clips draw scenarios from ``mix``; the evaluation set is exactly balanced.

    Train clips have even ids and eval clips odd ids, each generated from its
    own seed stream, so the splits never overlap.  ``corrupt_fraction`` of the
    training clips with events get a mislabeled video descriptor.
    """
    if n_train < 0 or n_eval < 0 or n_train + n_eval == 0:
        raise SpecError("dataset sizes must be non-negative and not both zero")
    if not 0.0 <= corrupt_fraction <= 1.0:
        raise SpecError("corrupt_fraction must lie in [0, 1]")
    mix = _normalise_mix(mix)
    scen = list(mix)
    if n_eval % len(scen):
        raise SpecError(f"cannot balance {n_eval} eval clips over {len(scen)} scenarios")
    rng = np.random.default_rng([seed, 11])
    train_scen = rng.choice(len(scen), size=n_train, p=[mix[s] for s in scen])
    corrupt = rng.uniform(size=n_train) < corrupt_fraction
    train = []
    for i in range(n_train):
        cid = 2 * i
        clip = generate_clip(ClipSpec.random(int(np.random.SeedSequence([seed, 0, i]).generate_state(1)[0]),
                                             scen[train_scen[i]], **spec_overrides), clip_id=cid)
        if corrupt[i] and clip.events:
            clip = corrupt_video_descriptor(clip)
        train.append(clip)
    per = n_eval // len(scen)
    evals = []
    for i in range(n_eval):
        cid = 2 * i + 1
        s = scen[i // per]
        clip_seed = int(np.random.SeedSequence([seed, 1, i]).generate_state(1)[0])
        evals.append(generate_clip(ClipSpec.random(clip_seed, s, **spec_overrides), clip_id=cid))
    return train, evals


def collate(clips: Sequence[LatentClip]):
    from .flowmatch import Batch

    if not clips:
        raise ValueError("no clips to collate")
    return Batch(
        np.stack([c.video for c in clips]),
        np.stack([c.audio for c in clips]),
        np.stack([c.c_v_ids() for c in clips]),
        np.stack([c.c_a_ids() for c in clips]),
    )


# ----------------------------------------------------------------------- I/O


def save_dataset(clips: Sequence[LatentClip], path) -> None:
    header: dict[str, object] = {"kind": "dataset", "count": len(clips)}
    blobs = {}
    for c in clips:
        key = f"clip.{c.clip_id:08d}"
        header[f"{key}.c_v"] = ",".join(c.c_v)
        header[f"{key}.c_a"] = ",".join(c.c_a)
        header[f"{key}.category"] = c.category
        header[f"{key}.corrupted"] = c.corrupted
        header[f"{key}.dt"] = f"{c.sync.delta_t_video!r},{c.sync.delta_t_audio!r}"
        header[f"{key}.volume"] = c.volume
        blobs[f"{key}.video"] = c.video
        blobs[f"{key}.audio"] = c.audio
        blobs[f"{key}.events"] = np.asarray(c.events, dtype=np.float64)
    container.write(path, header, blobs)


def load_dataset(path) -> list[LatentClip]:
    header, blobs = container.read(path)
    if header.get("kind") != "dataset":
        raise container.CheckpointError(f"{path} is not a dataset file")
    ids = sorted({int(k.split(".")[1]) for k in header if k.startswith("clip.")})
    clips = []
    for cid in ids:
        key = f"clip.{cid:08d}"
        dv, da = (float(x) for x in header[f"{key}.dt"].split(","))
        clips.append(LatentClip(
            clip_id=cid,
            video=blobs[f"{key}.video"],
            audio=blobs[f"{key}.audio"],
            c_v=tuple(header[f"{key}.c_v"].split(",")),
            c_a=tuple(header[f"{key}.c_a"].split(",")),
            sync=SyncSpec(dv, da),
            events=tuple(float(x) for x in blobs[f"{key}.events"]),
            category=header[f"{key}.category"],
            corrupted=header[f"{key}.corrupted"] == "true",
            volume=float(header[f"{key}.volume"]),
        ))
    if len(clips) != int(header["count"]):
        raise container.CheckpointError("dataset clip count does not match header")
    return clips


def write_manifest(clips: Sequence[LatentClip], path) -> None:
    with open(path, "w") as fh:
        for c in clips:
            fh.write(manifest_record(c).format() + "\n")


def dataset_digest(clips: Sequence[LatentClip]) -> str:
    import hashlib

    h = hashlib.sha256()
    for c in clips:
        h.update(f"{c.clip_id}|{','.join(c.c_v)}|{','.join(c.c_a)}|{c.category}|".encode())
        h.update(np.ascontiguousarray(c.video).tobytes())
        h.update(np.ascontiguousarray(c.audio).tobytes())
    return h.hexdigest()
