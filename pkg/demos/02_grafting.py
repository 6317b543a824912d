"""Grafting two single-modality towers into one joint model.

The video tower and the audio tower are built separately.  The joint model
copies both, then replaces self-attention in the last blocks with one
attention over video and audio tokens together.  Audio projections are
widened to the video width with small adapter matrices that start at zero.
"""

import numpy as np

from avfulldit import model as M
from avfulldit import tensor as T
from avfulldit.joint import new_parameter_count

cfg = M.ArchitectureConfig()
donor_v, donor_a = M.build_t2v(cfg, seed=0), M.build_t2a(cfg, seed=0)
joint = M.graft(donor_v, donor_a, cfg, seed=0)

added = joint.n_parameters() - donor_v.n_parameters() - donor_a.n_parameters()
print(f"video tower {donor_v.n_parameters():,} params, audio tower {donor_a.n_parameters():,}")
print(f"joint model adds {added:,} params; 4*C_a*(C_v-C_a)*N_av = {new_parameter_count(cfg.c_v, cfg.c_a, cfg.n_av):,}")
print("new parameter names:", sorted(n for n in joint.params if n.startswith("joint."))[:4], "...")

rng = np.random.default_rng(1)
x_v = rng.standard_normal((1, cfg.frames_v, cfg.lat_v))
x_a = rng.standard_normal((1, cfg.frames_a, cfg.lat_a))
c_v, c_a = np.array([[1, 5, 7]]), np.array([[1, 5, 7]])

with T.no_grad():
    ref = M.forward_video_only(donor_v, x_v, c_v, 0.5).data
    masked, _ = M.forward_joint(joint, x_v, x_a, c_v, c_a, 0.5, mask_cross=True)
    open_, _ = M.forward_joint(joint, x_v, x_a, c_v, c_a, 0.5)
print(f"\nwith audio<->video attention masked, video output differs from the donor by "
      f"{np.abs(masked.data - ref).max():.1e}")
print(f"with it open, audio already nudges the video output by {np.abs(open_.data - ref).max():.3f}")

# The matched baseline starts from the identical video tower.
twin = M.build_t2v(cfg, seed=0)
print("\nvideo weights identical in joint model and video-only twin:",
      joint.digest("video.") == twin.digest("video."))
