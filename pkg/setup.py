"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension: ``seal.kernels``
falls back to the vectorized numpy implementations when the import of
``seal._kernels`` fails.
"""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - cython is a build requirement
    cythonize = None

extensions = [
    Extension(
        "seal._kernels",
        ["src/seal/_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(extensions, language_level=3) if cythonize else [],
)
