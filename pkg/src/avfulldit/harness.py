"""Experiment orchestration: train, evaluate, matched-twin comparison, ablation grid.

Every run directory holds ``config.txt``, ``loss.log``, ``val.log``,
checkpoints, ``report.txt`` (starting with ``#`` deviation lines) and a
canonical ``summary.txt``.  Wall-clock timings go to ``timing.log`` only, so
all other files are reproducible bit for bit.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import container, descriptors
from . import evalsuite as E
from . import flowmatch as F
from . import model as M
from . import synthworld as W
from .canonical import ConfigError
from .config import ExperimentConfig

DEVIATIONS = (
    "latents come from fixed orthogonal linear encoders with exact inverses",
    "unimodal donors are randomly initialised towers, not pretrained models",
    "training timesteps are drawn uniformly from [0, 1]",
    "desk-scale optimisation: AdamW at train.lr for train.steps steps",
    "motion, contact and synchrony are exact proxies computed on decoded signals",
    "negative guidance uses the null descriptor",
    "each modality loss is a per-element mean so equal weights are scale-balanced",
)

Logger = Callable[[str], None]


def _quiet(_: str) -> None:
    pass


@dataclass
class RunResult:
    out: Path
    weights: M.ModelWeights
    losses: list[F.LossRecord]
    curve: list[tuple[int, float, float]]
    rows: list[E.Row]
    init_video_digest: str
    data_digest: str
    outputs: list = field(default_factory=list)


def build_data(cfg: ExperimentConfig) -> tuple[list[W.LatentClip], list[W.LatentClip]]:
    d = cfg.data
    try:
        return W.make_dataset(d.n_train, d.n_eval, d.seed, d.mix(), d.corrupt_fraction)
    except W.SpecError as exc:
        raise ConfigError(str(exc)) from None


def deviation_header(cfg: ExperimentConfig, extra: Sequence[str] = ()) -> str:
    lines = [f"# config {cfg.digest()}"]
    lines += [f"# deviation: {d}" for d in DEVIATIONS]
    lines += [f"# {x}" for x in extra]
    return "\n".join(lines) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ------------------------------------------------------------------ training


def train(cfg: ExperimentConfig, out: Path, train_clips, eval_clips, log: Logger = _quiet) -> RunResult:
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.txt", cfg.emit())
    t = cfg.train
    weights = M.build_kind(cfg.arch, t.seed, t.model)
    init_digest = weights.digest("video.")
    batch = W.collate(train_clips)
    eval_batch = W.collate(eval_clips) if eval_clips else None
    eval_ids = [c.clip_id for c in eval_clips]
    rng = np.random.default_rng([t.seed, 17])
    opt = F.AdamW(lr=t.lr)
    lw = F.LossWeights(t.lambda_v, t.lambda_a)
    replace_draw = len(batch) < t.batch_size

    losses: list[F.LossRecord] = []
    curve: list[tuple[int, float, float]] = []

    def validate(step: int) -> None:
        if eval_batch is None:
            return
        lv, la = F.validation_loss(weights, eval_ids, eval_batch)
        curve.append((step, lv, la))
        log(f"[{out.name}] step {step} val_v={lv:.4f} val_a={la:.4f}")

    validate(0)
    with open(out / "loss.log", "w") as loss_log, open(out / "timing.log", "w") as timing:
        for step in range(1, t.steps + 1):
            idx = rng.choice(len(batch), size=t.batch_size, replace=replace_draw)
            rec = F.train_step(weights, batch.take(idx), rng, lw, opt, step)
            losses.append(rec)
            loss_log.write(rec.format() + "\n")
            timing.write(f"step={step} wall_ms={rec.wall_ms}\n")
            if step % t.checkpoint_every == 0:
                M.save(weights, out / f"ckpt_{step:06d}.avfd")
            if step % t.val_every == 0 or step == t.steps:
                validate(step)
    M.save(weights, out / "final.avfd")
    _write(out / "val.log", "".join(f"step={s} loss_v={v!r} loss_a={a!r}\n" for s, v, a in curve))
    return RunResult(out, weights, losses, curve, [], init_digest, W.dataset_digest(train_clips))


def train_loss_ratio(losses: Sequence[F.LossRecord], head: int = 10, tail: int = 50) -> float:
    """Mean loss of the last ``tail`` steps over the mean of the first ``head`` steps."""
    if len(losses) < head + tail:
        raise ValueError(f"need at least {head + tail} steps to compare loss levels")
    first = math.fsum(r.loss for r in losses[:head]) / head
    last = math.fsum(r.loss for r in losses[-tail:]) / tail
    return last / first


# ---------------------------------------------------------------- evaluation


def generate_for(weights: M.ModelWeights, cfg: ExperimentConfig, clips: Sequence[W.LatentClip]) -> list[tuple]:
    """Sample one output per clip from its descriptors; noise is seeded by (infer.seed, clip id)."""
    if not clips:
        return []
    batch = W.collate(clips)
    guidance = F.GuidanceSpec(cfg.infer.scale_video, cfg.infer.scale_audio)
    seeds = [[cfg.infer.seed, c.clip_id] for c in clips]
    v, a = F.sample(weights, batch.c_v, batch.c_a, guidance, cfg.infer.steps, seed=seeds)
    return [(v[i], None if a is None else a[i]) for i in range(len(clips))]


def corrupted_subset(clips: Sequence[W.LatentClip]) -> list[W.LatentClip]:
    return [W.corrupt_video_descriptor(c) for c in clips if c.events]


def evaluate(weights: M.ModelWeights, cfg: ExperimentConfig, eval_clips: Sequence[W.LatentClip]) -> tuple[list[E.Row], list]:
    if not eval_clips:
        return [], []
    eval_batch = W.collate(eval_clips)
    err_v, err_a = F.validation_errors(weights, [c.clip_id for c in eval_clips], eval_batch)
    outputs = generate_for(weights, cfg, eval_clips)
    rows = E.score_set(outputs, eval_clips, list(zip(err_v, err_a)))
    bad = corrupted_subset(eval_clips)
    if bad:
        bad_v, bad_a = F.validation_errors(weights, [c.clip_id for c in bad], W.collate(bad))
        bad_rows = E.score_set(generate_for(weights, cfg, bad), bad, list(zip(bad_v, bad_a)))
        rows += [r for r in bad_rows if r.subset == "corrupted"]
    return rows, outputs


def write_report(out: Path, cfg: ExperimentConfig, rows: Sequence[E.Row], extra: Sequence[str] = ()) -> None:
    _write(out / "report.txt", deviation_header(cfg, extra) + E.format_report(rows))
    _write(out / "summary.txt", E.summary_text(rows))


def run(cfg: ExperimentConfig, out: Path, data=None, log: Logger = _quiet) -> RunResult:
    """Train one model and evaluate it on the balanced evaluation set."""
    train_clips, eval_clips = data if data is not None else build_data(cfg)
    res = train(cfg, out, train_clips, eval_clips, log)
    res.rows, res.outputs = evaluate(res.weights, cfg, eval_clips)
    write_report(out, cfg, res.rows, [f"model {cfg.train.model}", f"data {res.data_digest}",
                                     f"init video digest {res.init_video_digest}"])
    return res


# ------------------------------------------------------------------- compare

COMPARE_MODELS = ("t2av", "t2v", "t2av_vanilla")


def compare_configs(cfg: ExperimentConfig, seed: int) -> dict[str, ExperimentConfig]:
    base = {"train.seed": seed, "infer.seed": seed}
    return {
        "t2av": cfg.override(**base, **{"train.model": "joint"}),
        "t2v": cfg.override(**base, **{"train.model": "video"}),
        "t2av_vanilla": cfg.override(**base, **{"train.model": "joint", "arch.rope_variant": "vanilla"}),
    }


def t_interval(values: Sequence[float], confidence: float) -> tuple[float, float, float]:
    vals = [v for v in values if not math.isnan(v)]
    n = len(vals)
    if n == 0:
        return float("nan"), float("nan"), float("nan")
    mean = math.fsum(vals) / n
    if n < 2:
        return mean, float("nan"), float("nan")
    sd = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1))
    half = float(stats.t.ppf(0.5 + confidence / 2, n - 1)) * sd / math.sqrt(n)
    return mean, mean - half, mean + half


def _metric_value(rows: Sequence[E.Row], subset: str, metric: str) -> float:
    r = E.lookup(rows, subset, metric)
    return float("nan") if r is None or r.n == 0 else r.mean


DELTAS = (("t2av-t2v", "t2av", "t2v"), ("shrink-vanilla", "t2av", "t2av_vanilla"))


def compare(cfg: ExperimentConfig, out: Path, log: Logger = _quiet) -> str:
    """Matched-seed T2AV / T2V / vanilla-RoPE runs; returns the report text (also written to ``out``)."""
    data = build_data(cfg)
    n = cfg.compare.n_seeds
    seeds = [cfg.train.seed + i for i in range(n)]
    results: dict[str, list[RunResult]] = {m: [] for m in COMPARE_MODELS}
    header = []
    for seed in seeds:
        for name, sub in compare_configs(cfg, seed).items():
            log(f"compare: seed {seed} model {name}")
            results[name].append(run(sub, out / f"seed{seed}" / name, data, log))
        digests = {m: results[m][-1].init_video_digest for m in COMPARE_MODELS}
        header.append(f"seed {seed} init video digest " + " ".join(f"{m}={d}" for m, d in digests.items()))
        header.append(f"seed {seed} data digest " + " ".join(f"{m}={results[m][-1].data_digest}" for m in COMPARE_MODELS))

    lines = ["curve|model|seed|step|loss_v|loss_a"]
    for m in COMPARE_MODELS:
        for seed, res in zip(seeds, results[m]):
            lines += [f"curve|{m}|{seed}|{s}|{v!r}|{a!r}" for s, v, a in res.curve]

    keys = [(r.subset, r.metric) for r in results["t2av"][0].rows]
    conf = cfg.compare.confidence
    lines.append("metric|model|subset|metric|n_seeds|mean|ci_low|ci_high")
    for m in COMPARE_MODELS:
        for subset, metric in keys:
            vals = [_metric_value(res.rows, subset, metric) for res in results[m]]
            mean, lo, hi = t_interval(vals, conf)
            n_ok = sum(not math.isnan(v) for v in vals)
            lines.append(f"metric|{m}|{subset}|{metric}|{n_ok}|{mean!r}|{lo!r}|{hi!r}")
    lines.append("delta|pair|subset|metric|n_seeds|mean|ci_low|ci_high")
    for label, a, b in DELTAS:
        for subset, metric in keys:
            diffs = [_metric_value(ra.rows, subset, metric) - _metric_value(rb.rows, subset, metric)
                     for ra, rb in zip(results[a], results[b])]
            mean, lo, hi = t_interval(diffs, conf)
            n_ok = sum(not math.isnan(v) for v in diffs)
            lines.append(f"delta|{label}|{subset}|{metric}|{n_ok}|{mean!r}|{lo!r}|{hi!r}")

    extra = [f"seeds {','.join(map(str, seeds))}", f"confidence {conf!r}"] + header
    text = deviation_header(cfg, extra) + "\n".join(lines) + "\n"
    _write(out / "compare.txt", text)
    _write(out / "config.txt", cfg.emit())
    return text


def parse_compare(text: str) -> dict[str, list[list[str]]]:
    """Group the data lines of a comparison report by their leading tag."""
    out: dict[str, list[list[str]]] = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        parts = line.split("|")
        if parts[1] in ("model", "pair", "seed") and parts[0] in ("curve", "metric", "delta"):
            continue  # column header
        out.setdefault(parts[0], []).append(parts[1:])
    return out


# -------------------------------------------------------------------- ablate

GRID_KEYS = {
    "attention": "arch.attention",
    "rope": "arch.rope_variant",
    "lambda_a": "train.lambda_a",
    "scale_audio": "infer.scale_audio",
}


def parse_grid(spec: str | None, cfg: ExperimentConfig) -> dict[str, list[str]]:
    """``"rope=vanilla,shrink_audio;lambda_a=0.1,1.0"``; axes not named use the config's ablate section."""
    grid = {k: [v.strip() for v in getattr(cfg.ablate, k).split(",") if v.strip()] for k in GRID_KEYS}
    if spec:
        for part in spec.split(";"):
            if not part.strip():
                continue
            if "=" not in part:
                raise ConfigError(f"grid axis {part!r} needs the form name=v1,v2")
            key, values = (s.strip() for s in part.split("=", 1))
            if key not in GRID_KEYS:
                raise ConfigError(f"unknown grid axis {key!r}; expected one of {sorted(GRID_KEYS)}")
            grid[key] = [v.strip() for v in values.split(",") if v.strip()]
    for key, values in grid.items():
        if not values:
            raise ConfigError(f"grid axis {key!r} is empty")
    return grid


def cell_name(cell: dict[str, str]) -> str:
    return ",".join(f"{k}={cell[k]}" for k in GRID_KEYS)


def ablate(cfg: ExperimentConfig, out: Path, grid_spec: str | None = None, log: Logger = _quiet) -> str:
    grid = parse_grid(grid_spec, cfg)
    data = build_data(cfg)
    data_digest = W.dataset_digest(data[0])
    trained: dict[str, RunResult] = {}
    lines = ["cell|subset|metric|n|mean|std"]
    notes = []
    for combo in itertools.product(*(grid[k] for k in GRID_KEYS)):
        cell = dict(zip(GRID_KEYS, combo))
        name = cell_name(cell)
        try:
            sub = cfg.override(**{GRID_KEYS[k]: v for k, v in cell.items()})
        except (ConfigError, ValueError) as exc:
            notes.append(f"cell {name} rejected: {exc}")
            log(f"ablate: {name} rejected: {exc}")
            continue
        train_key = sub.override(**{"infer.scale_audio": 0.0}).digest()
        cell_dir = out / name.replace(",", "_").replace("=", "-")
        if train_key not in trained:
            log(f"ablate: training {name}")
            trained[train_key] = run(sub, cell_dir, data, log)
            rows = trained[train_key].rows
        else:
            log(f"ablate: reusing trained weights for {name}")
            rows, _ = evaluate(trained[train_key].weights, sub, data[1])
            write_report(cell_dir, sub, rows, [f"weights shared with {trained[train_key].out.name}"])
            _write(cell_dir / "config.txt", sub.emit())
        notes.append(f"cell {name} data {data_digest}")
        lines += [f"{name}|{r.subset}|{r.metric}|{r.n}|{r.mean!r}|{r.std!r}" for r in rows]
    text = deviation_header(cfg, notes) + "\n".join(lines) + "\n"
    _write(out / "ablate.txt", text)
    _write(out / "config.txt", cfg.emit())
    return text


# -------------------------------------------------------------------- sample


def sample_clips(ckpt: Path, c_v: Sequence[str], c_a: Sequence[str], guidance: F.GuidanceSpec,
                 seed: int, n: int, steps: int, out: Path) -> list[E.Row]:
    if n < 0:
        raise ConfigError("n must be non-negative")
    ids_v = descriptors.encode_video(c_v)
    ids_a = descriptors.encode_audio(c_a)
    out.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, np.ndarray] = {}
    per_clip = []
    if n:
        weights = M.load(ckpt)
        v, a = F.sample(weights, np.tile(ids_v, (n, 1)), np.tile(ids_a, (n, 1)), guidance, steps,
                        seed=[[seed, i] for i in range(n)])
        sync = weights.config.sync
        for i in range(n):
            vi = v[i] if v is not None else None
            ai = a[i] if a is not None else None
            if vi is not None:
                blobs[f"sample.{i:06d}.video"] = vi
                blobs[f"sample.{i:06d}.frames"] = W.decode_video(vi)
            if ai is not None:
                blobs[f"sample.{i:06d}.audio"] = ai
                blobs[f"sample.{i:06d}.features"] = W.decode_audio(ai)
            per_clip.append({
                "motion_magnitude": None if vi is None else E.motion_magnitude(vi),
                "contact_fraction": None if vi is None else float(E.contact_frames(vi).mean()),
                "sync_offset": None if vi is None or ai is None else E.sync_offset(vi, ai, sync),
            })
    header = {"kind": "samples", "count": n, "c_v": ",".join(c_v), "c_a": ",".join(c_a), "seed": seed,
              "steps": steps, "scale_video": guidance.scale_video, "scale_audio": guidance.scale_audio}
    container.write(out / "samples.avfd", header, blobs)
    rows = []
    for metric in ("motion_magnitude", "contact_fraction", "sync_offset"):
        n_ok, mean, std = E.summarize([p[metric] for p in per_clip])
        rows.append(E.Row("sample", metric, n_ok, mean, std))
    _write(out / "report.txt", E.format_report(rows))
    return rows


def timed(fn, *args, **kwargs):
    start = time.perf_counter()
    result = fn(*args, **kwargs)
    return result, time.perf_counter() - start
