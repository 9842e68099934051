from setuptools import Extension, setup

import numpy as np
from Cython.Build import cythonize

extensions = [
    Extension(
        "binsr._native",
        ["src/binsr/_native.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-march=native", "-fno-math-errno"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
