"""A world where sound is caused by what you see.

A ball falls and bounces; every floor impact makes a click whose loudness
follows the impact speed.  Both signals come out of one simulation, so the
ground truth for contact and synchrony is exact.
"""

import numpy as np

from avfulldit import evalsuite as E
from avfulldit import synthworld as W

spec = W.ClipSpec(seed=3, height=1.2, elasticity=0.7)
clip = W.generate_clip(spec)
print(f"descriptors: video {clip.c_v}, audio {clip.c_a}")
print("impacts at", ", ".join(f"{t:.3f}s" for t in clip.events))

frames = W.decode_video(clip.video)
energy = E.audio_energy(clip.audio)
print("\nraw frame  floor  height profile (left = high)")
for i, f in enumerate(frames):
    bar = "".join("#" if v > 0.5 else ("+" if v > 0.1 else ".") for v in f[::-1])
    print(f"  {i:2d} {i / spec.fps:5.3f}s {f[0]:.2f}  {bar}")

print("\naudio latent frames with energy (one column per 1/16 s):")
print("  " + "".join("|" if e > E.SILENCE_ENERGY else "." for e in energy))

print(f"\ncontact score on ground truth: {E.contact_score(clip.video, clip.events, clip.sync)}")
print(f"sync offset on ground truth:   {E.sync_offset(clip.video, clip.audio, clip.sync)} s")

feats = W.decode_audio(clip.audio)
for k in (-3, 2):
    moved = np.zeros_like(feats)
    if k > 0:
        moved[k:] = feats[:-k]
    else:
        moved[:k] = feats[-k:]
    off = E.sync_offset(clip.video, W.encode_audio(moved), clip.sync)
    print(f"audio delayed by {k:+d} frames -> measured offset {off:+.4f} s ({off / clip.sync.delta_t_audio:+.0f} frames)")

# Manifest filtering drops duplicates, silent clips and portrait footage.
train, _ = W.make_dataset(9, 0, seed=0)
records = [W.manifest_record(c) for c in train]
kept, dropped = W.filter_manifest(records)
print(f"\nmanifest: kept {len(kept)} of {len(records)}; dropped", [(r.clip_id, why) for r, why in dropped])
