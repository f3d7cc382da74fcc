"""Adversarial domain adaptation for transformer NER on a small numpy autodiff engine."""

__version__ = "0.1.0"
