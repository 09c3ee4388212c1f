"""Twin-branch convolutional networks fused by joint layers, for one-shot
pair recognition and one-shot anchor-grid detection."""

__version__ = "0.1.0"
