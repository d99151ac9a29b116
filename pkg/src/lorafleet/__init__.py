"""lorafleet: adapter-lifecycle control plane and deterministic serving/training simulator."""

__version__ = "0.1.0"
