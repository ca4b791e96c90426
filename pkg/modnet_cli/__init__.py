"""MODNet CLI — Multi-offset point-cloud denoising toolchain."""
__version__ = "1.0.0"
