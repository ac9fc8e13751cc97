"""Reduced-precision weight training for recurrent networks.

Ternarization, pow2-ternarization and exponential (power-of-two) weight
quantization with a full-precision shadow copy, plus a packed,
multiplication-free inference path for the resulting weights.
"""

__version__ = "0.1.0"
