import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("SPECOFFLOAD_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "specoffload._kernels",
                    ["src/specoffload/_kernels.pyx"],
                    # No FMA contraction: the compiled kernels must round exactly
                    # like the numpy fallback, one multiply and one add at a time.
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                    optional=True,
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
