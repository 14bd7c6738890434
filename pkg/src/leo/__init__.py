"""Few-shot meta-learning by gradient descent in a latent parameter-generator
space, with a direct parameter-adaptation baseline and analysis tools."""

__version__ = "0.1.0"
