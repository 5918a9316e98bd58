"""Digital-twin reinforcement learning for a simulated 5-joint arm."""

__version__ = "0.1.0"
