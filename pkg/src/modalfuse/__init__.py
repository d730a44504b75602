"""Multimodal segmentation with modality scoring, dropping and pseudo-label adaptation."""

__version__ = "0.1.0"
