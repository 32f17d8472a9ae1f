"""Ghost-probe region prediction from depth and RGB.

A hybrid 2D-3D pipeline: depth maps become gradient images and point
clouds, a convolutional encoder-decoder processes the image stack, a
point-set encoder processes the cloud, cross-attention fuses the two, and
a per-pixel head marks regions a hidden road user could emerge from.
"""

__version__ = "0.1.0"
