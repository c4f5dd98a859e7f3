"""Skin-lesion segmentation toolkit: models, augmentations, training, reports."""

__version__ = "0.1.0"
