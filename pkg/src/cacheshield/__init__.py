"""Cache side-channel verification and runtime patch synthesis for small programs."""

__version__ = "0.1.0"
