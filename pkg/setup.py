"""Build the optional Cython VM kernel.

The package works without it; ``posearch.evalvm`` falls back to the
pure-Python interpreter when the extension is missing.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("POSEARCH_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:  # pragma: no cover
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "posearch.evalvm._machine_c",
                    ["src/posearch/evalvm/_machine_c.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
