"""Language-embedded 3D Gaussian surface fields with quantized feature compression."""

__version__ = "0.1.0"
