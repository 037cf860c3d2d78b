"""rrlab: adversarial training with rectified rejection, at desk scale."""

__version__ = "0.1.0"
