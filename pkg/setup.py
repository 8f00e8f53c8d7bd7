"""Build script: compiles the optional Cython kernels.

The package works without the extension (a pure-Python fallback is
selected at import time), so any failure to cythonize or compile degrades
to a pure build instead of aborting the install.
"""

from setuptools import Extension, setup

extensions = []
try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "tvae._kernels._special",
                sources=["src/tvae/_kernels/_special.pyx"],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - depends on build host
    print(f"warning: building without compiled kernels ({exc})")

setup(ext_modules=extensions)
