"""Policy-guided tree search over generated reasoning steps."""

__version__ = "0.1.0"
