"""Why audio positions are shrunk before rotary encoding.

Video latents cover 0.25 s each and audio latents 0.0625 s, so one video
frame spans four audio frames.  With plain integer positions the two
streams drift apart; dividing audio positions by four puts simultaneous
tokens on the same rotation.
"""

import numpy as np

from avfulldit.rope import RopeConfig, SyncSpec, audio_positions, rope_phase, video_positions

sync = SyncSpec(delta_t_video=0.25, delta_t_audio=0.0625)
tau = int(sync.tau)
print(f"one video latent frame = {tau} audio latent frames\n")

for variant in ("vanilla", "shrink_audio", "expand_video"):
    cfg = RopeConfig(head_dim=8, variant=variant)
    pv = video_positions(4, sync.tau, variant)
    pa = audio_positions(16, sync, variant)
    print(f"{variant}")
    print("  time   video pos  audio pos  slowest-angle gap")
    for p in range(4):
        gap = abs(rope_phase(pv[p], cfg)[0] - rope_phase(pa[tau * p], cfg)[0])
        print(f"  {p * sync.delta_t_video:4.2f}s  {pv[p]:9.2f}  {pa[tau * p]:9.2f}  {gap:10.4f}")
    print()

# The relative-position property survives the rescaling: logits depend on
# the position difference only, so shifting everything leaves them unchanged.
from avfulldit import tensor as T
from avfulldit.rope import apply_rope

cfg = RopeConfig(8)
q, k = np.random.default_rng(0).standard_normal((2, 1, 1, 1, 8))
for offset in (0.0, 3.25):
    qr = apply_rope(T.tensor(q), [1.0 + offset], cfg).data.ravel()
    kr = apply_rope(T.tensor(k), [0.25 + offset], cfg).data.ravel()
    print(f"logit with both positions shifted by {offset}: {qr @ kr:.12f}")
