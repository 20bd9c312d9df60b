"""Language-mediated object-centric representation learning."""

__version__ = "0.1.0"
