"""Real-time detection gateway for low-compute robot clients."""

__version__ = "0.1.0"
