"""Build script for the optional compiled kernel extension.

The package works without the extension (a NumPy fallback is selected at
import time); set TAROT_NO_EXTENSION=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("TAROT_NO_EXTENSION"):
    import numpy as np
    from Cython.Build import cythonize

    ext = Extension(
        "tarot._core",
        ["src/tarot/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-fopenmp", "-ffast-math"],
        # -ffast-math lets gcc vectorize exp() through libmvec; link it explicitly.
        extra_link_args=["-fopenmp", "-lmvec", "-lm"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext_modules = cythonize([ext], language_level=3)

setup(ext_modules=ext_modules)
