"""Build the optional Cython kernel.

The package works without it: ``clrpool.kernels`` falls back to the numpy
implementation when the extension is missing.

Developers: ``python setup.py build_ext --inplace``
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("CLRPOOL_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "clrpool._ckernel",
                    ["src/clrpool/_ckernel.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
