"""Build the optional Cython kernels.

The package works without them: ``hydrocascade.hydro.backend`` falls back to
the numpy implementation when the extension cannot be imported. Set
``HYDROCASCADE_NO_EXT=1`` to skip compilation entirely.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("HYDROCASCADE_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "hydrocascade.hydro._kernels",
                    ["src/hydrocascade/hydro/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
