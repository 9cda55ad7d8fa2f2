"""Build the optional compiled raster kernel.

The package works without it (numpy fallback); set NESTFIELD_NO_EXT=1 to skip
compilation entirely.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("NESTFIELD_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "nestfield.raster._composite",
                    ["src/nestfield/raster/_composite.pyx"],
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
