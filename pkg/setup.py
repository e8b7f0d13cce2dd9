"""Build script: compiles the optional Cython convolution kernels.

The package works without the extension (a numpy im2col fallback is selected
at import time); set CRCSEG_NO_EXT=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup

extensions = []
if not os.environ.get("CRCSEG_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize

        extensions = cythonize(
            [
                Extension(
                    "crcseg._ckernels",
                    ["src/crcseg/_ckernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        extensions = []

setup(ext_modules=extensions)
