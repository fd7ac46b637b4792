"""Multi-timescale data augmentation for autoencoder factor models and a
mispricing-driven long-short quantile strategy."""

__version__ = "0.1.0"
