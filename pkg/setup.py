"""Build script for the optional compiled rANS kernel.

The package works without the extension (a pure-Python coder with identical
byte output is selected at import time), so a failed compile only costs speed.
"""

from setuptools import setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/refcodec/rans/_core.pyx"],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
