"""Low-dose volumetric denoising with a hybrid 2D/3D Wasserstein GAN."""

__version__ = "0.1.0"
