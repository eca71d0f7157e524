"""Synthetic RFID backscatter fingerprinting toolkit.

Waveform synthesis, a from-scratch 1D CNN, AWGN augmentation, synchronous
federated averaging, and an experiment harness.
"""

__version__ = "0.1.0"
