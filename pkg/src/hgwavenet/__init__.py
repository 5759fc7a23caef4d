"""HGWaveNet: hyperbolic diffusion + dilated causal convolution for temporal link prediction."""

__version__ = "0.1.0"
