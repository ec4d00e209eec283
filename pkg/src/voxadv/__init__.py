"""Time-domain adversarial attacks on joint speaker-verification and anti-spoofing systems."""

__version__ = "0.1.0"
