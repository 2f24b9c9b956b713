"""Cross-domain imitation learning with DTW-shaped entropic optimal transport.

Library layout:

- :mod:`otpush.numkit` — arrays, RNG streams, reverse-mode tape, AdamW
- :mod:`otpush.geometry` — rigid poses, action chunks, normalization
- :mod:`otpush.dtw` — dynamic time warping and pseudo-pairing
- :mod:`otpush.transport` — Sinkhorn OT, shaped costs, MMD, Wasserstein-2
- :mod:`otpush.model` — encoder/policy networks and loss assembly
- :mod:`otpush.pushmini` — two-domain 2D pushing benchmark environment
- :mod:`otpush.trainer` — co-training loop with method switch
- :mod:`otpush.analysis` — latent alignment diagnostics and PCA plots
- :mod:`otpush.cli` — operator command line
"""

__version__ = "0.1.0"
