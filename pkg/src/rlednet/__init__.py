"""Low-light image enhancement with a rank-constrained feature block and a
U-shaped transformer backbone, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
