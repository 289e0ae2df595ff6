"""Build hook for the optional compiled kernels.

The extension is marked optional: without a C compiler the install still
succeeds and ``deidkit.kernels`` falls back to the numpy implementation.
"""
import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "deidkit._kernels",
        ["src/deidkit/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
        optional=True,
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
