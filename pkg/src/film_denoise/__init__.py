"""Noise-conditional image denoising toolkit.

A FiLM-modulated U-Net trained across a family of Poisson-Gaussian noise
levels, built on an in-package reverse-mode autodiff engine, with a training
loop, image-quality metrics and a sweep/compare evaluation harness.
"""

__version__ = "0.1.0"
