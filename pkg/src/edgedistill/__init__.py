"""Vision-language dataset distillation with a contrastive and diversity-regularized diffusion generator."""

__version__ = "0.1.0"
