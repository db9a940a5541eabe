"""Builds the optional compiled kernels; the package still works without them."""
from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    import numpy as np
except ImportError:
    cythonize = None

if cythonize is not None:
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension("asi._kernels", ["src/asi/_kernels.pyx"],
                   include_dirs=[np.get_include()],
                   extra_compile_args=["-O3"],
                   define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
