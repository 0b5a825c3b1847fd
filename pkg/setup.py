"""Builds the optional compiled rasterizer kernel.

If Cython or a C compiler is unavailable the package still installs and
uses the numpy fallback.
"""
import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("SPLATCAMS_NO_EXT", "") in ("", "0"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        openmp = [] if sys.platform == "darwin" else ["-fopenmp"]
        ext_modules = cythonize(
            [
                Extension(
                    "splatcams.raster._kernel",
                    ["src/splatcams/raster/_kernel.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"] + openmp,
                    extra_link_args=openmp,
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError as exc:  # pragma: no cover
        print(f"skipping compiled kernel: {exc}", file=sys.stderr)

setup(ext_modules=ext_modules)
