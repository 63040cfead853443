"""Phrase-level alignment toolkit: synthetic scenes, contrastive phrase
augmentation, a tiny windowed LM, and alignment training with a KL leash."""

__version__ = "0.1.0"
