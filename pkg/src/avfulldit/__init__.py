"""Joint audio-video diffusion transformer built by grafting two unimodal towers.

Pure numpy: a small reverse-mode autodiff core, DiT blocks with adaLN
modulation, full audio-video self-attention with width adapters,
time-aligned rotary positions, flow-matching training and sampling, and a
synthetic world where every sound has a visible cause.
"""

__version__ = "0.1.0"
