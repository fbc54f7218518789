"""faceshield: adversarial face protection against detector-driven DeepFake pipelines."""

__version__ = "0.1.0"
