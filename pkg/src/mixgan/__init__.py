"""Mixed-sample discriminator training for GANs with saturated losses."""

__version__ = "0.1.0"
