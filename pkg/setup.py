import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

import os

# No -ffast-math and no fp contraction: the compiled kernels must produce
# bit-identical results to the pure-numpy fallback backend. The prange
# loops only split disjoint outputs, so results don't depend on the thread
# count; OpenMP is opt-in (FRUSTUMFUSION_OPENMP=1) because the BLAS thread
# pool already saturates small machines.
_omp = os.environ.get("FRUSTUMFUSION_OPENMP") == "1"
ext = Extension(
    "frustumfusion._kernels._ckernels",
    sources=["src/frustumfusion/_kernels/_ckernels.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off"]
    + (["-fopenmp"] if _omp else []),
    extra_link_args=["-fopenmp"] if _omp else [],
    language="c",
)

setup(
    ext_modules=cythonize(
        [ext],
        compiler_directives={"language_level": "3"},
    ),
)
