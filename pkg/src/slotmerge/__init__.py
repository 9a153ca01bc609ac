"""Slot Attention with differentiable, mass-weighted slot merging.

Modules: ``diffcore`` (reverse-mode autodiff on numpy), ``slotattn``,
``merge``, ``threshold``, ``metrics``, ``scenes``, ``model`` / ``train`` and
``cli``.
"""
__version__ = "0.1.0"
