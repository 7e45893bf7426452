"""Style-invariant cardiac segmentation with wavelet AdaIN style transfer and TTA."""
