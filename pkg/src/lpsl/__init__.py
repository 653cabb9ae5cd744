"""Label position bias measurement and unbiased structure learning for graphs."""
from ._backend import BACKEND

__all__ = ["BACKEND", "__version__"]
__version__ = "0.1.0"
