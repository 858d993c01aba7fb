"""Delay-aware neural routing: packet simulator, telemetry, log-space link-weight policy and trainers."""

__version__ = "0.1.0"
