"""Toy T2V / T2A donors, the grafted audio-video model, and checkpoints.

Weights live in a flat name -> Tensor mapping.  Tower parameters are named
``video.*`` / ``audio.*`` identically in donors and in the joint model, so
grafting is a copy and every donor weight can be traced by name.  Parameters
that exist only in the joint model live under ``joint.*`` (width adapters)
or ``xattn.*`` (cross-attention ablation).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import canonical, container
from . import tensor as T
from .blocks import BlockWeights, init_block, modulate, modulation, timestep_embedding, unimodal_block
from .descriptors import AUDIO_DESC_LEN, AUDIO_VOCAB, VIDEO_DESC_LEN, VIDEO_VOCAB
from .joint import (
    AdapterWeights,
    ConfigurationError,
    CrossModalWeights,
    JointBlockWeights,
    check_widths,
    joint_block,
)
from .rope import RopeConfig, SyncSpec, audio_positions, video_positions
from .tensor import ShapeError, Tensor

KINDS = ("joint", "video", "audio")
ATTENTION_VARIANTS = ("avfull", "cross_baseline")


@dataclass(frozen=True)
class ArchitectureConfig:
    c_v: int = 64
    c_a: int = 48
    n_v: int = 2
    n_a: int = 2
    n_av: int = 2
    heads_v: int = 2
    heads_a: int = 2
    c_text_v: int = 32
    c_text_a: int = 32
    c_time: int = 32
    frames_v: int = 8
    lat_v: int = 32
    frames_a: int = 32
    lat_a: int = 8
    dt_v: float = 0.25
    dt_a: float = 0.0625
    rope_base: float = 10000.0
    rope_variant: str = "shrink_audio"
    attention: str = "avfull"
    gate_bias: float = 1.0

    def __post_init__(self):
        if self.n_av < 1 or self.n_v < 0 or self.n_a < 0:
            raise ConfigurationError(f"need n_av >= 1 and n_v, n_a >= 0; got {self.n_v}/{self.n_a}/{self.n_av}")
        check_widths(self.c_v, self.c_a)
        for c, h, name in ((self.c_v, self.heads_v, "video"), (self.c_a, self.heads_a, "audio")):
            if h < 1 or c % h or (c // h) % 2:
                raise ConfigurationError(f"{name} width {c} with {h} heads needs an even head size")
        if self.attention not in ATTENTION_VARIANTS:
            raise ConfigurationError(f"attention must be one of {ATTENTION_VARIANTS}, got {self.attention!r}")
        RopeConfig(2, self.rope_base, self.rope_variant)
        SyncSpec(self.dt_v, self.dt_a)
        if min(self.frames_v, self.frames_a, self.lat_v, self.lat_a, self.c_time) < 1:
            raise ConfigurationError("latent shapes and time width must be positive")

    @property
    def sync(self) -> SyncSpec:
        return SyncSpec(self.dt_v, self.dt_a)

    def rope(self, modality: str) -> RopeConfig:
        # joint attention shares the video head geometry
        c, h = (self.c_a, self.heads_a) if modality == "audio" else (self.c_v, self.heads_v)
        return RopeConfig(c // h, self.rope_base, self.rope_variant)

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        pv = video_positions(self.frames_v, self.sync.tau, self.rope_variant)
        pa = audio_positions(self.frames_a, self.sync, self.rope_variant)
        return pv, pa

    def items(self, prefix: str = "arch.") -> dict[str, object]:
        return canonical.dataclass_items(self, prefix)


@dataclass
class ModelWeights:
    kind: str
    config: ArchitectureConfig
    params: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def n_parameters(self, prefix: str = "") -> int:
        return sum(p.data.size for n, p in self.params.items() if n.startswith(prefix))

    def trainable(self) -> list[Tensor]:
        return [self.params[n] for n in sorted(self.params)]

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over the (sorted) names and raw bytes of matching parameters."""
        h = hashlib.sha256()
        for name in sorted(self.params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.kind, self.config, {n: T.tensor(p.data, requires_grad=True) for n, p in self.params.items()}
        )


# ----------------------------------------------------------------- shapes


def tower_shapes(cfg: ArchitectureConfig, modality: str) -> dict[str, tuple[int, ...]]:
    if modality == "video":
        c, c_text, lat, depth, vocab = cfg.c_v, cfg.c_text_v, cfg.lat_v, cfg.n_v + cfg.n_av, len(VIDEO_VOCAB)
    else:
        c, c_text, lat, depth, vocab = cfg.c_a, cfg.c_text_a, cfg.lat_a, cfg.n_a + cfg.n_av, len(AUDIO_VOCAB)
    shapes = {
        "time.w1": (cfg.c_time, c), "time.b1": (c,), "time.w2": (c, c), "time.b2": (c,),
        "cond.table": (vocab, c_text),
        "embed.w": (lat, c), "embed.b": (c,),
        "final.mod_w": (c, 2 * c), "final.mod_b": (2 * c,),
        "final.norm_g": (c,), "final.norm_b": (c,),
        "final.w": (c, lat), "final.b": (lat,),
    }
    for i in range(depth):
        for name, shape in BlockWeights.shapes(c, c_text).items():
            shapes[f"blocks.{i}.{name}"] = shape
    return {f"{modality}.{k}": v for k, v in shapes.items()}


def parameter_shapes(cfg: ArchitectureConfig, kind: str) -> dict[str, tuple[int, ...]]:
    if kind == "video":
        return tower_shapes(cfg, "video")
    if kind == "audio":
        return tower_shapes(cfg, "audio")
    shapes = {**tower_shapes(cfg, "video"), **tower_shapes(cfg, "audio")}
    for j in range(cfg.n_av):
        if cfg.attention == "avfull" and cfg.c_v > cfg.c_a:
            for name, shape in AdapterWeights.shapes(cfg.c_v, cfg.c_a).items():
                shapes[f"joint.{j}.{name}"] = shape
        elif cfg.attention == "cross_baseline":
            for name, shape in CrossModalWeights.shapes(cfg.c_v, cfg.c_a).items():
                shapes[f"xattn.{j}.{name}"] = shape
    return shapes


# ----------------------------------------------------------- construction


def _init_tower(rng: np.random.Generator, cfg: ArchitectureConfig, modality: str) -> dict[str, np.ndarray]:
    shapes = tower_shapes(cfg, modality)
    c = cfg.c_v if modality == "video" else cfg.c_a
    c_text = cfg.c_text_v if modality == "video" else cfg.c_text_a
    depth = (cfg.n_v if modality == "video" else cfg.n_a) + cfg.n_av
    out = {}
    for name, shape in shapes.items():
        short = name.split(".", 1)[1]
        if short.startswith("blocks."):
            continue
        if short == "cond.table":
            out[name] = rng.normal(0.0, 1.0, size=shape)
        elif short == "final.norm_g":
            out[name] = np.ones(shape)
        elif short == "final.mod_w":
            out[name] = rng.normal(0.0, 0.1 / math.sqrt(shape[0]), size=shape)
        elif len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            out[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
    for i in range(depth):
        for k, v in init_block(rng, c, c_text, cfg.gate_bias).items():
            out[f"{modality}.blocks.{i}.{k}"] = v
    return {n: out[n] for n in shapes}


def _weights(kind: str, cfg: ArchitectureConfig, arrays: dict[str, np.ndarray]) -> ModelWeights:
    return ModelWeights(kind, cfg, {n: T.tensor(a, requires_grad=True) for n, a in arrays.items()})


def build_t2v(cfg: ArchitectureConfig, seed: int) -> ModelWeights:
    """Video-only model of depth n_v + n_av (the donor and the matched T2V twin)."""
    return _weights("video", cfg, _init_tower(np.random.default_rng([seed, 1]), cfg, "video"))


def build_t2a(cfg: ArchitectureConfig, seed: int) -> ModelWeights:
    return _weights("audio", cfg, _init_tower(np.random.default_rng([seed, 2]), cfg, "audio"))


def graft(video_ckpt: ModelWeights, audio_ckpt: ModelWeights, cfg: ArchitectureConfig, seed: int = 0) -> ModelWeights:
    """Assemble the joint model from a video donor and an audio donor.

    Every donor weight is copied under its own name.  Width adapters start at
    zero; the cross-attention ablation gets random projections with zero gates.
    """
    for ckpt, kind in ((video_ckpt, "video"), (audio_ckpt, "audio")):
        if ckpt.kind != kind:
            raise ConfigurationError(f"expected a {kind} checkpoint, got kind {ckpt.kind!r}")
        want = parameter_shapes(cfg, kind)
        have = {n: p.shape for n, p in ckpt.params.items()}
        if have != want:
            diff = sorted(set(want.items()) ^ set(have.items()))[:4]
            raise ConfigurationError(
                f"{kind} checkpoint does not match the config (widths/depth); first differences: {diff}"
            )
    arrays = {n: p.data.copy() for n, p in video_ckpt.params.items()}
    arrays.update({n: p.data.copy() for n, p in audio_ckpt.params.items()})
    rng = np.random.default_rng([seed, 3])
    for name, shape in parameter_shapes(cfg, "joint").items():
        if name.startswith("joint."):
            arrays[name] = np.zeros(shape)
        elif name.startswith("xattn."):
            if name.endswith("_gate"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
    return _weights("joint", cfg, arrays)


def build(cfg: ArchitectureConfig, seed: int) -> ModelWeights:
    """Joint model grafted from freshly initialised donors derived from ``seed``."""
    return graft(build_t2v(cfg, seed), build_t2a(cfg, seed), cfg, seed)


def build_kind(cfg: ArchitectureConfig, seed: int, kind: str) -> ModelWeights:
    if kind == "joint":
        return build(cfg, seed)
    if kind == "video":
        return build_t2v(cfg, seed)
    if kind == "audio":
        return build_t2a(cfg, seed)
    raise ConfigurationError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------- forward


def _block(w: ModelWeights, modality: str, i: int) -> BlockWeights:
    return BlockWeights.from_params(w.params, f"{modality}.blocks.{i}")


def embed_condition(ids, table: Tensor) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise ShapeError(f"condition ids must be [B, L>=1], got {ids.shape}")
    vocab = table.shape[0]
    if ids.min() < 0 or ids.max() >= vocab:
        raise ShapeError(f"condition ids out of range for vocabulary of {vocab}")
    onehot = np.zeros(ids.shape + (vocab,))
    np.put_along_axis(onehot, ids[..., None], 1.0, axis=-1)
    return T.matmul(T.constant(onehot), table)


def _as_batch(t, b: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.shape == (1,) and b > 1:
        t = np.full(b, t[0])
    if t.shape != (b,):
        raise ShapeError(f"timesteps {t.shape} do not match batch {b}")
    return t


def _tower_in(w: ModelWeights, modality: str, x, cond_ids, t, frames: int, lat: int):
    x = x if isinstance(x, Tensor) else T.constant(x)
    if x.ndim != 3 or x.shape[1:] != (frames, lat):
        raise ShapeError(f"{modality} latents must be [B, {frames}, {lat}], got {x.shape}")
    p = w.params
    t = _as_batch(t, x.shape[0])
    temb = timestep_embedding(t, p[f"{modality}.time.w1"], p[f"{modality}.time.b1"],
                              p[f"{modality}.time.w2"], p[f"{modality}.time.b2"])
    cond = embed_condition(cond_ids, p[f"{modality}.cond.table"])
    if cond.shape[0] != x.shape[0]:
        raise ShapeError(f"condition batch {cond.shape[0]} != latent batch {x.shape[0]}")
    h = T.add(T.matmul(x, p[f"{modality}.embed.w"]), p[f"{modality}.embed.b"])
    return h, cond, temb


def _tower_out(w: ModelWeights, modality: str, h: Tensor, temb: Tensor) -> Tensor:
    p = w.params
    shift, scale_ = modulation(temb, p[f"{modality}.final.mod_w"], p[f"{modality}.final.mod_b"], 2)
    x = modulate(T.layer_norm(h, p[f"{modality}.final.norm_g"], p[f"{modality}.final.norm_b"]), shift, scale_)
    return T.add(T.matmul(x, p[f"{modality}.final.w"]), p[f"{modality}.final.b"])


def joint_block_weights(w: ModelWeights, j: int) -> JointBlockWeights:
    cfg = w.config
    video = _block(w, "video", cfg.n_v + j)
    audio = _block(w, "audio", cfg.n_a + j)
    adapters = cross = None
    if f"joint.{j}.wq_an" in w.params:
        adapters = AdapterWeights.from_params(w.params, f"joint.{j}")
    if f"xattn.{j}.vq" in w.params:
        cross = CrossModalWeights.from_params(w.params, f"xattn.{j}")
    return JointBlockWeights(video, audio, adapters, cross)


def forward_joint(w: ModelWeights, x_v_t, x_a_t, c_v, c_a, t, mask_cross: bool = False) -> tuple[Tensor, Tensor]:
    """Predict video and audio velocities with the grafted model."""
    if w.kind != "joint":
        raise ConfigurationError(f"forward_joint needs joint weights, got {w.kind!r}")
    cfg = w.config
    pos_v, pos_a = cfg.positions()
    rope_v, rope_a = cfg.rope("video"), cfg.rope("audio")
    h_v, cond_v, temb_v = _tower_in(w, "video", x_v_t, c_v, t, cfg.frames_v, cfg.lat_v)
    h_a, cond_a, temb_a = _tower_in(w, "audio", x_a_t, c_a, t, cfg.frames_a, cfg.lat_a)
    if h_v.shape[0] != h_a.shape[0]:
        raise ShapeError("video and audio batches differ")
    for i in range(cfg.n_v):
        h_v = unimodal_block(h_v, cond_v, temb_v, _block(w, "video", i), pos_v, rope_v, cfg.heads_v)
    for i in range(cfg.n_a):
        h_a = unimodal_block(h_a, cond_a, temb_a, _block(w, "audio", i), pos_a, rope_a, cfg.heads_a)
    for j in range(cfg.n_av):
        h_v, h_a = joint_block(
            h_v, h_a, cond_v, cond_a, temb_v, temb_a, joint_block_weights(w, j),
            pos_v, pos_a, rope_v, rope_a, cfg.heads_v, cfg.heads_a, mask_cross,
        )
    return _tower_out(w, "video", h_v, temb_v), _tower_out(w, "audio", h_a, temb_a)


def _forward_single(w: ModelWeights, modality: str, x_t, c, t) -> Tensor:
    cfg = w.config
    pos = cfg.positions()[0 if modality == "video" else 1]
    rope = cfg.rope(modality)
    frames, lat = (cfg.frames_v, cfg.lat_v) if modality == "video" else (cfg.frames_a, cfg.lat_a)
    depth = (cfg.n_v if modality == "video" else cfg.n_a) + cfg.n_av
    heads = cfg.heads_v if modality == "video" else cfg.heads_a
    h, cond, temb = _tower_in(w, modality, x_t, c, t, frames, lat)
    for i in range(depth):
        h = unimodal_block(h, cond, temb, _block(w, modality, i), pos, rope, heads)
    return _tower_out(w, modality, h, temb)


def forward_video_only(w: ModelWeights, x_v_t, c_v, t) -> Tensor:
    if w.kind != "video":
        raise ConfigurationError(f"forward_video_only needs video weights, got {w.kind!r}")
    return _forward_single(w, "video", x_v_t, c_v, t)


def forward_audio_only(w: ModelWeights, x_a_t, c_a, t) -> Tensor:
    if w.kind != "audio":
        raise ConfigurationError(f"forward_audio_only needs audio weights, got {w.kind!r}")
    return _forward_single(w, "audio", x_a_t, c_a, t)


def predict(w: ModelWeights, x_v, x_a, c_v, c_a, t) -> tuple[Tensor | None, Tensor | None]:
    """Velocity prediction for any model kind; absent modalities come back as None."""
    if w.kind == "joint":
        return forward_joint(w, x_v, x_a, c_v, c_a, t)
    if w.kind == "video":
        return forward_video_only(w, x_v, c_v, t), None
    return None, forward_audio_only(w, x_a, c_a, t)


def null_condition(cfg: ArchitectureConfig, batch: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros((batch, VIDEO_DESC_LEN), np.int64), np.zeros((batch, AUDIO_DESC_LEN), np.int64)


# ------------------------------------------------------------- checkpoints


def _header(w: ModelWeights) -> dict[str, object]:
    return {"format": "AVFD1", "kind": w.kind, **w.config.items("arch.")}


def save(w: ModelWeights, path) -> None:
    container.write(path, _header(w), {n: p.data for n, p in w.params.items()})


def load(path, expected: ArchitectureConfig | None = None) -> ModelWeights:
    header, blobs = container.read(Path(path))
    kind = header.get("kind")
    if kind not in KINDS:
        raise container.CheckpointError(f"checkpoint has unknown kind {kind!r}")
    cfg = canonical.dataclass_from_items(ArchitectureConfig, header, "arch.", strict=False)
    if expected is not None and expected != cfg:
        stored, wanted = cfg.items(""), expected.items("")
        diff = {k: (stored[k], wanted[k]) for k in stored if stored[k] != wanted[k]}
        raise container.CheckpointError(f"checkpoint config differs from expected (stored, expected): {diff}")
    want = parameter_shapes(cfg, kind)
    have = {n: a.shape for n, a in blobs.items()}
    if want != have:
        missing = sorted(set(want) - set(have))[:3]
        extra = sorted(set(have) - set(want))[:3]
        bad = sorted(n for n in set(want) & set(have) if want[n] != have[n])[:3]
        raise container.CheckpointError(
            f"checkpoint parameters do not match its config: missing={missing} extra={extra} wrong_shape={bad}"
        )
    return _weights(kind, cfg, {n: blobs[n] for n in want})


def with_config(cfg: ArchitectureConfig, **changes) -> ArchitectureConfig:
    return replace(cfg, **changes)
