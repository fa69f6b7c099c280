"""Relevance propagation for spiking networks and relevance-guided event augmentation."""

__version__ = "0.1.0"
