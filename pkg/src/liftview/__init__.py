"""Desk-scale novel-view synthesis from a handful of posed images.

The package lifts image features into a voxel volume, collapses it to a
tri-plane field, renders it with a differentiable volume renderer, and
refines novel views with a conditional denoising diffusion model. Everything
runs on a self-contained float64 reverse-mode autodiff engine.
"""

from liftview.tensor import Tensor, Tape, no_grad

__all__ = ["Tensor", "Tape", "no_grad"]
__version__ = "0.1.0"
