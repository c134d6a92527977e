"""Streaming rolling-window denoiser with dual-anchor KV caching.

The package covers the full pipeline: a deterministic toy latent task, a
small transformer denoiser with hand-written gradients, two-stage
distillation (trajectory regression then distribution matching), the
streaming engine itself, and a benchmark harness.
"""

__version__ = "0.1.0"
