"""Multi-token prediction speech decoder lab."""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402,F401
