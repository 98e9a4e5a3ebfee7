"""Lifelong learning for dense feedforward networks via drift-triggered neuron splitting."""

__version__ = "0.1.0"
