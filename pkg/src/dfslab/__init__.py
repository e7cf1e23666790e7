"""Multi-exit network training lab.

Feature partitioning plus stop-gradient feature referencing over a
purpose-built reverse-mode tape, with exact operation accounting and a
budgeted early-exit evaluator. See the subcommands under ``dfslab --help``.
"""
from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
