"""Extended MixStyle feature augmentation and a desk-scale single-domain-generalization benchmark."""

__version__ = "0.1.0"
