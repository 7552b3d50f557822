# Builds the optional compiled kernel core. The package falls back to the
# pure-numpy kernels at import time when the extension is unavailable, so a
# plain install without Cython or a C compiler still works.

from setuptools import setup

extensions = []
try:
    import numpy as np
    from setuptools import Extension
    from Cython.Build import cythonize

    # -ffp-contract=off keeps the compiled kernels bit-identical to the
    # numpy fallback (no FMA contraction).
    extensions = cythonize(
        [
            Extension(
                "vfusion.kernels._core",
                sources=["src/vfusion/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O2", "-ffp-contract=off", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except ImportError:
    print("Cython or numpy unavailable; building pure-python package")

setup(ext_modules=extensions)
