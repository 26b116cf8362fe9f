"""Few-shot classification with LoRA-adapted dual encoders and diffusion-generated support data."""

__version__ = "0.1.0"
