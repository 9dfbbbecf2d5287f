"""Spectral reconstruction of low-bitrate mono audio.

A residual stack of depthwise-separable convolutional autoencoder blocks is
trained on stacked real/imaginary STFT planes to restore high-frequency
content lost to low-bitrate encoding. The package covers the full loop:
dataset preparation, training with hand-rolled backprop, int8 quantized
inference and perceptual-metric evaluation.
"""

__version__ = "0.1.0"
