import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("SHADOWRANGE_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext = Extension(
            "shadowrange._speedups",
            ["src/shadowrange/_speedups.pyx"],
            libraries=["crypto"],
            extra_compile_args=["-O3", "-Wno-deprecated-declarations"],
            optional=True,
        )
        ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
