"""Hot-loop kernels: compiled extension when built, numpy fallback otherwise.

Both backends implement the same fixed per-element accumulation order
(ascending inner dimension, multiply then add, no FMA), so swapping them
never changes a single bit of any result. Selection via environment:

    DFS_KERNELS=auto      prefer the compiled extension (default)
    DFS_KERNELS=compiled  require it, fail if not built
    DFS_KERNELS=python    force the numpy fallback

``benchmarks/bench_kernels.py`` compares the two.
"""
import os

from . import _matmul_np

try:
    from . import _matmul_cy
except ImportError:
    _matmul_cy = None

_choice = os.environ.get("DFS_KERNELS", "auto")
if _choice == "python":
    _impl = _matmul_np
elif _choice == "compiled":
    if _matmul_cy is None:
        raise ImportError(
            "DFS_KERNELS=compiled but the extension is not built; "
            "run `pip install -e . --no-build-isolation` first"
        )
    _impl = _matmul_cy
elif _choice == "auto":
    _impl = _matmul_cy if _matmul_cy is not None else _matmul_np
else:
    raise ValueError(f"DFS_KERNELS must be auto, compiled or python, got {_choice!r}")

BACKEND = "compiled" if _impl is _matmul_cy else "python"
matmul_ordered = _impl.matmul_ordered

__all__ = ["BACKEND", "matmul_ordered"]
