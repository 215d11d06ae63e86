"""Compact dynamic Gaussian splatting: Fourier-motion Gaussians, CPU renderer and trainer."""
__version__ = "0.1.0"
