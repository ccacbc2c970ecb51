"""Semi-supervised GAN laboratory: (K+1)-class discriminator, complement generator, 2D case studies."""

__version__ = "0.1.0"
