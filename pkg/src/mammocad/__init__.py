"""Two-stage mammography pipeline: cGAN lesion detection feeding a DenseNet classifier."""

__version__ = "0.1.0"
