"""Robust biometric feature extraction with information bottlenecks and sphere projection.

Trains softmax / DVIB / DVSP feature extractors on MNIST, attacks them in
feature space, and scores verification (EER) and attack hardness (RI).
"""
from . import numerics  # noqa: F401  sets float64 as the torch default

__version__ = "0.1.0"
