"""Build script for the optional compiled kernels (LARS, im2col).

If Cython or a C compiler is unavailable the package still installs and
falls back to the pure NumPy solver at import time.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("MDFSC_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    f"mdfsc.{name}",
                    [f"src/mdfsc/{name}.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3"],
                )
                for name in ("_lars_ext", "_conv_ext")
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
