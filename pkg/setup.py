"""Builds the optional compiled matmul kernel.

The package is fully functional without it (a numpy fallback with identical
bit-level behaviour is selected at import time), so the extension is skipped
when Cython or a C compiler is unavailable.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "dfslab._kernels._matmul_cy",
                ["src/dfslab/_kernels/_matmul_cy.pyx"],
                # no FMA contraction: the kernel contract is "multiply, then
                # add, both rounded" so results match the numpy fallback bitwise
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
