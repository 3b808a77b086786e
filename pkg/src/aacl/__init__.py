"""Semi-supervised segmentation with uniform-strength augmentation and adaptive CutMix."""

__version__ = "0.1.0"
