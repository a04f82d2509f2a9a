"""Waveform speech enhancement with a 1-D U-Net and dilated ASPP variants."""

__version__ = "0.1.0"
