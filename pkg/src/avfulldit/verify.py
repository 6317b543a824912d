"""Release gate: every cross-module invariant, plus seeded mutations that must break it.

``run_checks()`` returns ``(name, ok, detail)`` triples in a fixed order with
deterministic details, so two runs print identical listings.
"""

from __future__ import annotations

import contextlib
import math
import tempfile
from pathlib import Path
from typing import Callable
from unittest import mock

import numpy as np

from . import blocks as B
from . import config as C
from . import flowmatch as F
from . import joint as J
from . import model as M
from . import rope as R
from . import synthworld as W
from . import tensor as T
from .evalsuite import contact_score, sync_offset

GRAD_TOL = 1e-4
CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = []


def check(name: str):
    def register(fn):
        CHECKS.append((name, fn))
        return fn

    return register


def tiny_arch(**changes) -> M.ArchitectureConfig:
    base = dict(c_v=16, c_a=8, n_v=1, n_a=1, n_av=1, heads_v=2, heads_a=2, c_text_v=8, c_text_a=8,
                c_time=8, frames_v=2, lat_v=4, frames_a=8, lat_a=3)
    base.update(changes)
    return M.ArchitectureConfig(**base)


def _grad_result(err: float) -> tuple[bool, str]:
    return err < GRAD_TOL, f"max_rel={err:.3e}"


# ------------------------------------------------------------------ op grads


def _leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    return T.tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)


def _probe(out: T.Tensor, rng) -> T.Tensor:
    """Scalar ``sum(out * r)`` with a fixed random ``r`` so every output coordinate matters."""
    r = T.constant(rng.standard_normal(out.shape))
    return T.sum(T.mul(out, r))


def _op_cases():
    rng = np.random.default_rng(11)
    a, b = _leaf(rng, 3, 4, 5), _leaf(rng, 5, 6)
    x = _leaf(rng, 2, 7)
    g, bias = _leaf(rng, 7), _leaf(rng, 7)
    row = _leaf(rng, 1, 7)
    y = _leaf(rng, 4, 3, 2, 6)
    angles = rng.uniform(-3, 3, size=(3, 3))
    s1, s2 = _leaf(rng, 2, 3), _leaf(rng, 2, 4)
    m1, m2 = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    return {
        "matmul": (lambda: _probe(T.matmul(a, b), np.random.default_rng(1)), [a, b]),
        "softmax": (lambda: _probe(T.softmax(x), np.random.default_rng(2)), [x]),
        "layer_norm": (lambda: _probe(T.layer_norm(x, g, bias), np.random.default_rng(3)), [x, g, bias]),
        "add": (lambda: _probe(T.add(x, row), np.random.default_rng(4)), [x, row]),
        "mul": (lambda: _probe(T.mul(x, row), np.random.default_rng(5)), [x, row]),
        "scale": (lambda: _probe(T.scale(x, -1.7), np.random.default_rng(6)), [x]),
        "silu": (lambda: _probe(T.silu(x), np.random.default_rng(7)), [x]),
        "reshape": (lambda: _probe(T.reshape(a, (12, 5)), np.random.default_rng(8)), [a]),
        "transpose": (lambda: _probe(T.transpose(a, (2, 0, 1)), np.random.default_rng(9)), [a]),
        "concat": (lambda: _probe(T.concat([s1, s2], axis=1), np.random.default_rng(10)), [s1, s2]),
        "split": (lambda: _probe(T.split(x, [3, 4], axis=1)[1], np.random.default_rng(13)), [x]),
        "sum": (lambda: T.scale(T.sum(x), 0.7), [x]),
        "mse": (lambda: T.mse(m1, m2), [m1, m2]),
        "rope": (lambda: _probe(T.rope_rotate(y, angles[:, :3]), np.random.default_rng(14)), [y]),
    }


def _register_op_checks():
    for op in T.BACKWARD_RULES:
        def fn(op=op):
            cases = _op_cases()
            f, params = cases[op]
            return _grad_result(T.finite_difference_check(f, params))
        check(f"grad.op.{op}")(fn)


_register_op_checks()


# --------------------------------------------------------------- block grads


def _random_joint(cfg: M.ArchitectureConfig, seed: int = 0) -> M.ModelWeights:
    """A joint model with every parameter (adapters and gates included) nonzero."""
    w = M.build(cfg, seed)
    rng = np.random.default_rng([seed, 99])
    for name, p in w.params.items():
        if name.startswith(("joint.", "xattn.")):
            p.data[...] = 0.3 * rng.standard_normal(p.shape)
    return w


def _model_inputs(cfg: M.ArchitectureConfig, b: int, seed: int):
    rng = np.random.default_rng(seed)
    x_v = rng.standard_normal((b, cfg.frames_v, cfg.lat_v))
    x_a = rng.standard_normal((b, cfg.frames_a, cfg.lat_a))
    c_v = rng.integers(0, 9, size=(b, 3))
    c_a = rng.integers(0, 9, size=(b, 3))
    t = rng.uniform(0.05, 0.95, size=b)
    return x_v, x_a, c_v, c_a, t


@check("grad.block.unimodal")
def _grad_unimodal():
    rng = np.random.default_rng(21)
    c, ct, heads = 8, 6, 2
    params = {k: T.tensor(v, requires_grad=True) for k, v in B.init_block(rng, c, ct).items()}
    w = B.BlockWeights(**params)
    h, cond = _leaf(rng, 2, 5, c), _leaf(rng, 2, 3, ct)
    temb = _leaf(rng, 2, c)
    cfg = R.RopeConfig(c // heads)
    target = T.constant(rng.standard_normal((2, 5, c)))
    f = lambda: T.mse(B.unimodal_block(h, cond, temb, w, np.arange(5.0), cfg, heads), target)
    return _grad_result(T.finite_difference_check(f, [h, cond, temb] + list(params.values()), n_coords=96))


def _joint_block_check(cross: bool):
    cfg = tiny_arch(attention="cross_baseline" if cross else "avfull")
    w = _random_joint(cfg, 5)
    jw = M.joint_block_weights(w, 0)
    rng = np.random.default_rng(22)
    h_v, h_a = _leaf(rng, 2, cfg.frames_v, cfg.c_v), _leaf(rng, 2, cfg.frames_a, cfg.c_a)
    cond_v, cond_a = _leaf(rng, 2, 3, cfg.c_text_v), _leaf(rng, 2, 3, cfg.c_text_a)
    te_v, te_a = _leaf(rng, 2, cfg.c_v), _leaf(rng, 2, cfg.c_a)
    pv, pa = cfg.positions()
    tv, ta = T.constant(rng.standard_normal(h_v.shape)), T.constant(rng.standard_normal(h_a.shape))

    def f():
        ov, oa = J.joint_block(h_v, h_a, cond_v, cond_a, te_v, te_a, jw, pv, pa, cfg.rope("video"),
                               cfg.rope("audio"), cfg.heads_v, cfg.heads_a)
        return T.add(T.mse(ov, tv), T.mse(oa, ta))

    params = [h_v, h_a, cond_v, cond_a, te_v, te_a] + w.trainable()
    return _grad_result(T.finite_difference_check(f, params, n_coords=128))


@check("grad.block.joint_avfull")
def _grad_joint_avfull():
    return _joint_block_check(cross=False)


@check("grad.block.joint_cross_baseline")
def _grad_joint_cross():
    return _joint_block_check(cross=True)


@check("grad.model.joint_forward")
def _grad_model():
    cfg = tiny_arch()
    w = _random_joint(cfg, 6)
    x_v, x_a, c_v, c_a, t = _model_inputs(cfg, 2, 23)
    rng = np.random.default_rng(24)
    tv, ta = rng.standard_normal(x_v.shape), rng.standard_normal(x_a.shape)

    def f():
        pv, pa = M.forward_joint(w, x_v, x_a, c_v, c_a, t)
        return F.joint_loss(pv, pa, tv, ta, F.LossWeights())[0]

    return _grad_result(T.finite_difference_check(f, w.trainable(), n_coords=128))


# ---------------------------------------------------------------- structure


@check("rope.sync_alignment")
def _rope_alignment():
    sync = R.SyncSpec(0.25, 0.0625)
    tau = int(sync.tau)
    n_v = 8
    cfg = R.RopeConfig(16, variant="shrink_audio")
    pv = R.video_positions(n_v, sync.tau, "shrink_audio")
    pa = R.audio_positions(n_v * tau, sync, "shrink_audio")
    aligned = all(np.array_equal(R.rope_phase(pv[p], cfg), R.rope_phase(pa[tau * p], cfg)) for p in range(n_v))
    cfg_x = R.RopeConfig(16, variant="expand_video")
    pvx = R.video_positions(n_v, sync.tau, "expand_video")
    pax = R.audio_positions(n_v * tau, sync, "expand_video")
    aligned_x = all(np.array_equal(R.rope_phase(pvx[p], cfg_x), R.rope_phase(pax[tau * p], cfg_x)) for p in range(n_v))
    van = R.RopeConfig(16, variant="vanilla")
    pvv = R.video_positions(n_v, sync.tau, "vanilla")
    pav = R.audio_positions(n_v * tau, sync, "vanilla")
    broken = all(not np.array_equal(R.rope_phase(pvv[p], van), R.rope_phase(pav[tau * p], van)) for p in range(1, n_v))
    ok = aligned and aligned_x and broken
    return ok, f"shrink={aligned} expand={aligned_x} vanilla_misaligned={broken}"


@check("joint.masked_equivalence")
def _masked_equivalence():
    cfg = M.ArchitectureConfig()
    donor_v, donor_a = M.build_t2v(cfg, 7), M.build_t2a(cfg, 7)
    w = M.graft(donor_v, donor_a, cfg, 7)
    rng = np.random.default_rng(31)
    for name, p in w.params.items():
        if name.startswith("joint."):
            p.data[...] = rng.standard_normal(p.shape)  # masked branch must not depend on adapters
    worst = 0.0
    with T.no_grad():
        for i in range(20):
            x_v, x_a, c_v, c_a, t = _model_inputs(cfg, 1, 100 + i)
            joint_v, _ = M.forward_joint(w, x_v, x_a, c_v, c_a, t, mask_cross=True)
            ref = M.forward_video_only(donor_v, x_v, c_v, t)
            worst = max(worst, float(np.max(np.abs(joint_v.data - ref.data))))
    return worst < 1e-8, f"max_abs={worst:.3e}"


@check("graft.preservation")
def _graft_preservation():
    cfg = tiny_arch()
    dv, da = M.build_t2v(cfg, 3), M.build_t2a(cfg, 3)
    w = M.graft(dv, da, cfg, 3)
    copied = all(np.array_equal(w[n].data, p.data) for d in (dv, da) for n, p in d.params.items())
    zero = all(not p.data.any() for n, p in w.params.items() if n.startswith("joint."))
    twin = M.build(cfg, 3).digest("video.") == M.build_t2v(cfg, 3).digest("video.")
    return copied and zero and twin, f"copied={copied} adapters_zero={zero} twin_digest_equal={twin}"


@check("params.adapter_count")
def _adapter_count():
    rng = np.random.default_rng(41)
    results = []
    for _ in range(6):
        heads = 2
        c_a = 4 * int(rng.integers(1, 5))
        c_v = c_a + 4 * int(rng.integers(0, 5))
        n_av = int(rng.integers(1, 4))
        cfg = tiny_arch(c_v=c_v, c_a=c_a, n_av=n_av, heads_v=heads, heads_a=heads)
        shapes = M.parameter_shapes(cfg, "joint")
        counted = sum(int(np.prod(s)) for n, s in shapes.items() if n.startswith("joint."))
        results.append((c_v, c_a, n_av, counted, J.new_parameter_count(c_v, c_a, n_av),
                        4 * c_a * (c_v - c_a) * n_av))
    ok = all(r[3] == r[4] == r[5] for r in results)
    return ok, " ".join(f"({v},{a},{n})={c}" for v, a, n, c, _, _ in results)


@check("flow.endpoints_and_oracle")
def _flow_identities():
    rng = np.random.default_rng(51)
    x0, eps = rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 4, 5))
    ends = np.array_equal(F.make_noisy(x0, eps, 0.0).x_t, x0) and np.array_equal(F.make_noisy(x0, eps, 1.0).x_t, eps)
    worst = 0.0
    for steps in (1, 10, 50):
        fn = lambda xv, xa, t: (eps - x0, None)
        out, _ = F.euler_sample(fn, eps.copy(), None, steps)
        worst = max(worst, float(np.max(np.abs(out - x0))))
    ok = ends and worst < 1e-12
    return ok, f"endpoints={ends} oracle_max_abs={worst:.3e}"


@check("flow.cfg_degeneracy")
def _cfg_degeneracy():
    rng = np.random.default_rng(52)
    pos, neg = rng.standard_normal(20), rng.standard_normal(20)
    ok1 = np.array_equal(F.cfg_combine(pos, neg, 1.0), pos)
    ok0 = np.array_equal(F.cfg_combine(pos, neg, 0.0), neg)
    cfg = tiny_arch()
    w = M.build(cfg, 8)
    c_v = np.array([[1, 4, 7]])
    c_a = np.array([[1, 4, 7]])
    a = F.sample(w, c_v, c_a, F.GuidanceSpec(1.0, 1.0), steps=3, seed=5)
    x_v, x_a = F.initial_noise(w, 1, 5)

    def cond_only(xv, xa, t):
        with T.no_grad():
            pv, pa = M.predict(w, xv, xa, c_v, c_a, t)
        return pv.data, pa.data

    b = F.euler_sample(cond_only, x_v, x_a, 3)
    ok_s = np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    return ok1 and ok0 and ok_s, f"s1={ok1} s0={ok0} sampler_s1_bitwise={ok_s}"


@check("world.encoder_round_trip")
def _encoders():
    rng = np.random.default_rng(61)
    frames = rng.uniform(0, 1, size=(16, W.HEIGHT_CELLS))
    feats = rng.uniform(0, 1, size=(32, W.FEATURES_PER_FRAME))
    ev = float(np.max(np.abs(W.decode_video(W.encode_video(frames)) - frames)))
    ea = float(np.max(np.abs(W.decode_audio(W.encode_audio(feats)) - feats)))
    return max(ev, ea) < 1e-10, f"video={ev:.1e} audio={ea:.1e}"


@check("world.bounce_kinematics")
def _kinematics():
    worst = 0.0
    rng = np.random.default_rng(62)
    for _ in range(20):
        h, e, g = rng.uniform(0.5, 1.5), rng.uniform(0.5, 0.85), 9.81
        sim = W.bounce_times(h, e, g, 2.0)
        t0 = math.sqrt(2 * h / g)
        closed = [t0 * (1 + 2 * sum(e ** i for i in range(1, k + 1))) for k in range(len(sim))]
        worst = max(worst, max(abs(a - b) for a, b in zip(sim, closed)))
    return worst < 1e-9, f"max_abs={worst:.1e}"


@check("world.ground_truth_scores")
def _ground_truth():
    _, clips = W.make_dataset(0, 12, 71)
    contact = all(contact_score(c.video, c.events, c.sync) == 1.0 for c in clips)
    offsets = [sync_offset(c.video, c.audio, c.sync) for c in clips if c.events]
    sync_ok = all(o is not None and abs(o) <= 0.0625 + 1e-12 for o in offsets)
    return contact and sync_ok, f"contact_all_one={contact} sync_within_one_frame={sync_ok}"


def constructed_manifest() -> list[W.ManifestRecord]:
    """Ten records: two duplicates, one silent, one portrait."""
    recs = [W.ManifestRecord(i, f"g{i}", 0.5, 1920, 1080, "bouncing_ball") for i in range(10)]
    recs[3] = W.ManifestRecord(3, "g1", 0.5, 1920, 1080, "bouncing_ball")
    recs[7] = W.ManifestRecord(7, "g5", 0.5, 1920, 1080, "silent_drift")
    recs[4] = W.ManifestRecord(4, "g4", 0.0, 1920, 1080, "ambient_only")
    recs[8] = W.ManifestRecord(8, "g8", 0.5, 1080, 1920, "bouncing_ball")
    return recs


@check("world.manifest_filters")
def _filters():
    kept, dropped = W.filter_manifest(constructed_manifest())
    reasons = {r.clip_id: why for r, why in dropped}
    ok = (len(kept) == 6 and reasons == {3: "duplicate", 7: "duplicate", 4: "silent", 8: "portrait"})
    return ok, f"kept={len(kept)} dropped={sorted(reasons.items())}"


@check("io.checkpoint_and_config_round_trip")
def _round_trips():
    cfg = tiny_arch()
    w = M.build(cfg, 9)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "w.avfd"
        M.save(w, path)
        back = M.load(path, cfg)
        first = path.read_bytes()
        M.save(back, path)
        same_bytes = first == path.read_bytes()
    same = back.digest() == w.digest() and back.config == cfg and same_bytes
    text = C.ExperimentConfig().emit()
    cfg_ok = C.parse(text).emit() == text
    return same and cfg_ok, f"checkpoint={same} config={cfg_ok}"


# ----------------------------------------------------------------- mutations


def _mutate_adapter_shape():
    original = J.AdapterWeights.shapes

    def wider(c_v, c_a):
        s = dict(original(c_v, c_a))
        s["wq_an"] = (c_a, c_v - c_a + 1)
        return s

    return mock.patch.object(J.AdapterWeights, "shapes", staticmethod(wider))


def _mutate_graft():
    original = M.graft

    def noisy(*args, **kwargs):
        w = original(*args, **kwargs)
        for n, p in w.params.items():
            if n.startswith("joint."):
                p.data[...] = 1e-3
        return w

    return mock.patch.object(M, "graft", noisy)


def _mutate_mask():
    return mock.patch.object(J, "cross_modal_mask", lambda a, b: np.zeros((a + b, a + b)))


def _mutate_rope():
    return mock.patch.object(R, "audio_positions", lambda n, sync, variant="shrink_audio": np.arange(n, dtype=float))


def _mutate_cfg():
    return mock.patch.object(F, "cfg_combine", lambda pos, neg, s: pos if neg is None else pos + s * (neg - pos))


def _mutate_encoder():
    original = W.decode_video
    return mock.patch.object(W, "decode_video", lambda x: original(x) * (1 + 1e-6))


def _mutate_filter():
    return mock.patch.object(W, "volume_threshold", lambda *a: -1.0)


MUTATIONS: dict[str, Callable[[], contextlib.AbstractContextManager]] = {
    "adapter-shape": _mutate_adapter_shape,
    "graft-adapters": _mutate_graft,
    "attention-mask": _mutate_mask,
    "rope-audio-positions": _mutate_rope,
    "cfg-combine": _mutate_cfg,
    "video-decoder": _mutate_encoder,
    "silence-threshold": _mutate_filter,
}
for _op in T.BACKWARD_RULES:
    MUTATIONS[f"backward:{_op}"] = lambda _op=_op: T.mutated_rule(_op)


def run_checks(mutation: str | None = None, only: str | None = None) -> list[tuple[str, bool, str]]:
    if mutation is not None and mutation not in MUTATIONS:
        raise KeyError(f"unknown mutation {mutation!r}; known: {', '.join(MUTATIONS)}")
    ctx = MUTATIONS[mutation]() if mutation else contextlib.nullcontext()
    results = []
    with ctx:
        for name, fn in CHECKS:
            if only and not name.startswith(only):
                continue
            try:
                ok, detail = fn()
            except Exception as exc:  # a crashing invariant is a failing invariant
                ok, detail = False, f"error: {type(exc).__name__}: {exc}"
            results.append((name, bool(ok), detail))
    return results


def format_results(results) -> str:
    return "".join(f"{'PASS' if ok else 'FAIL'} {name} {detail}\n" for name, ok, detail in results)
