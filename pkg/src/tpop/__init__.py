"""Tree proof-of-position: protocol, analytical model and agent-based simulator."""

__version__ = "0.1.0"
