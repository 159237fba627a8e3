"""Two-stage adaptive personalization for multi-modal multi-task federated learning."""

__version__ = "0.1.0"
