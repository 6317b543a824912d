"""Train a small joint model and look at what it generates.

Runs the smoke configuration for fewer steps so it finishes in seconds,
then samples clips from descriptors and scores them.
"""

import sys
import tempfile
from pathlib import Path

from avfulldit import config as C
from avfulldit import evalsuite as E
from avfulldit import flowmatch as F
from avfulldit import harness as H

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150
cfg = C.smoke(**{"train.steps": steps, "train.checkpoint_every": steps, "train.val_every": max(steps // 3, 1)})
out = Path(tempfile.mkdtemp(prefix="avfd-demo-"))

res = H.run(cfg, out, log=print)
if len(res.losses) >= 60:
    print(f"\nlate/early training loss: {H.train_loss_ratio(res.losses):.3f}")
print("validation curve (step, video, audio):")
for s, v, a in res.curve:
    print(f"  {s:4d}  {v:.4f}  {a:.4f}")

print("\nheld-out scores:")
for subset in ("bouncing_ball", "silent_drift", "ambient_only"):
    c = E.lookup(res.rows, subset, "contact_score")
    s = E.lookup(res.rows, subset, "sync_abs_offset")
    print(f"  {subset:14s} contact {c.mean:.3f}  |sync| {s.mean if s.n else float('nan'):.3f} s (n={s.n})")

rows = H.sample_clips(out / "final.avfd", ["scene:bouncing_ball", "height:high", "contact:yes"],
                      ["clicks:yes", "count:3-4", "bed:quiet"], F.GuidanceSpec(), seed=0, n=4, steps=10,
                      out=out / "samples")
print("\nsamples for 'a ball dropped from high up, clicking':")
for r in rows:
    print(f"  {r.metric:17s} n={r.n} mean={r.mean:.4f}")
print(f"\nartifacts in {out}")
