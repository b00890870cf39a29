"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a pure-numpy fallback is selected
at import time); building it just makes the per-pixel detection kernels and
descriptor distance matrix faster.  Build in place with:

    python3 setup.py build_ext --inplace
"""

from setuptools import setup

ext_modules = []
include_dirs = []
try:
    from Cython.Build import cythonize
    import numpy

    ext_modules = cythonize(
        ["src/skyloc/_kernels/_native.pyx"],
        language_level=3,
    )
    include_dirs = [numpy.get_include()]
except ImportError:
    print("Cython or numpy unavailable; building without the native kernel extension")

setup(
    ext_modules=ext_modules,
    include_dirs=include_dirs,
)
