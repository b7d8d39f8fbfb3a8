import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# No -ffast-math / -march=native, and FMA contraction off: the compiled
# kernels must stay IEEE-exact per operation so their output is bit-identical
# to the pure-Python backend.
extensions = [
    Extension(
        "splatct._kernels",
        ["src/splatct/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-fopenmp", "-ffp-contract=off"],
        extra_link_args=["-fopenmp"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
