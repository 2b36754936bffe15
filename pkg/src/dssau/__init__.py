"""Dual sparse selection attention U-Net for pubic symphysis / fetal head segmentation."""

__version__ = "0.1.0"
