"""Semi-supervised two-stage Q-learning and doubly robust policy evaluation."""

__version__ = "0.1.0"
