"""Matched-seed comparison of the joint model against its video-only twin.

For each seed three models train on the same data: the joint model, the
video-only twin and a joint model with plain integer rotary positions.
The report gives per-seed curves, per-scenario metrics and paired deltas
with t-intervals.  This demo uses a reduced configuration; pass
configs/default.txt via ``avfulldit compare`` for the full run.
"""

import tempfile
from pathlib import Path

from avfulldit import config as C
from avfulldit import harness as H

cfg = C.smoke(**{
    "data.n_train": 48, "data.n_eval": 6, "train.steps": 60, "train.checkpoint_every": 60,
    "train.val_every": 30, "infer.steps": 6, "compare.n_seeds": 3,
})
out = Path(tempfile.mkdtemp(prefix="avfd-compare-"))
text = H.compare(cfg, out, log=print)
parsed = H.parse_compare(text)

print("\npaired deltas (mean [low, high]):")
for pair, subset, metric, n, mean, lo, hi in parsed["delta"]:
    if subset in ("bouncing_ball", "corrupted") and metric in ("contact_score", "sync_abs_offset", "val_loss_v"):
        print(f"  {pair:15s} {subset:14s} {metric:16s} {float(mean):+.4f} [{float(lo):+.4f}, {float(hi):+.4f}] n={n}")
print(f"\nfull report: {out / 'compare.txt'}")
