import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the numpy fallback is used at import
    cythonize = None

# fp-contract=off keeps a*b+c from fusing, so the native kernel rounds exactly
# like the numpy path and the scalar oracle.
compile_args = ["-O3", "-ffp-contract=off", "-fopenmp"]
link_args = ["-fopenmp"]
if os.environ.get("LIFMIXER_NO_OPENMP"):
    compile_args.remove("-fopenmp")
    link_args = []

ext_modules = []
if cythonize is not None and not os.environ.get("LIFMIXER_PURE_PYTHON"):
    ext_modules = cythonize(
        [
            Extension(
                "lifmixer._lif_native",
                ["src/lifmixer/_lif_native.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=compile_args,
                extra_link_args=link_args,
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
