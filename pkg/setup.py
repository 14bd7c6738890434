import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # Pure-python backend still works; leo.backend falls back at import time.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "leo._ckernels",
                ["src/leo/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
