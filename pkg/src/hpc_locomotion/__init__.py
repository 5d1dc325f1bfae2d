"""Two-stage perceptive locomotion training on a planar biped."""

__version__ = "0.1.0"
