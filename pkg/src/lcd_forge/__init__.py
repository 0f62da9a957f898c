"""Hierarchical language-conditioned control with a latent diffusion planner.

Submodules: ``tensor`` (autograd), ``diffusion``, ``denoiser``, ``language``,
``env``, ``llp``, ``hlp``, ``rollout`` and ``cli``.
"""

__version__ = "0.1.0"
