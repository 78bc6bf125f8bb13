"""On-policy actor-critic RL with multi-sample uncertainty layers and an OOD detection benchmark."""

__version__ = "0.1.0"
