"""Low-shot semantic segmentation of hyperspectral imagery.

Stacked multi-loss convolutional autoencoders (SMCAE) learn spatial-spectral
features without labels; a semi-supervised MLP (SS-MLP) classifies pixels from
those features with only a handful of labels per class.
"""

__version__ = "0.1.0"
