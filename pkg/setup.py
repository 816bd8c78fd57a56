import warnings

import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the lattice kernel if possible; fall back to pure numpy otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:
            warnings.warn(f"compiled lattice kernel skipped ({exc}); numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"building {ext.name} failed ({exc}); numpy fallback will be used")


try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "satkit._latfb",
                ["src/satkit/_latfb.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions, cmdclass={"build_ext": optional_build_ext})
