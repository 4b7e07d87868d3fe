"""modelserve: real-model backends for the audit wire protocol."""

__version__ = "0.1.0"
