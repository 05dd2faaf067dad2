"""In-context segmentation and region captioning with a sparse-MoE decoder, at desk scale."""

__version__ = "0.1.0"
