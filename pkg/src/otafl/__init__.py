"""Federated learning over noisy fading MACs: simulator, algorithms, and bounds."""

__version__ = "0.1.0"
