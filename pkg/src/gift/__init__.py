"""Transferable adversarial facial images via global latent search.

Toy and checkpoint-backed backends, the inversion and adversarial search
loops, evaluation metrics, commercial API probing and an experiment runner.
"""

__version__ = "0.1.0"
