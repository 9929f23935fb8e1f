"""Multi-source domain-adversarial training for emergency-room revisit prediction."""

__version__ = "0.1.0"
