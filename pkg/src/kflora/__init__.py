"""Online fine-tuning of low-rank adapters with a diagonal extended Kalman filter."""

__version__ = "0.1.0"
