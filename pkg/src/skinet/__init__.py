"""Uncertainty-gated skin-lesion segmentation and classification with saliency explanations."""

__version__ = "0.1.0"
