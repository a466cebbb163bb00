import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "cda.kernels._cyops",
                ["src/cda/kernels/_cyops.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # The pure-numpy kernel backend is used when the extension is absent.
    extensions = []

setup(ext_modules=extensions)
