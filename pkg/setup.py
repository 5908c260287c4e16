"""Build the optional compiled kernels; the package falls back to numpy without them."""
import os

from setuptools import Extension, setup

extensions = []
if os.environ.get("FLIPEQUIV_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        extensions = cythonize(
            [
                Extension(
                    "flipequiv._ckernels",
                    ["src/flipequiv/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )
    except ImportError:
        extensions = []

setup(ext_modules=extensions)
