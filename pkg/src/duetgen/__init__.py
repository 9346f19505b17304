"""duetgen: reactive leader-to-follower duet motion generation.

Tokenizes two-person motion and pairwise relation with VQ-VAEs, models the
token streams with a small multimodal autoregressive LM conditioned on beat
audio tokens, refines decoded followers with a leader-frozen diffusion prior,
and evaluates with solo / interactive / rhythmic metrics.
"""

__version__ = "0.1.0"
