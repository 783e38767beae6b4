import os

from setuptools import setup

ext_modules = []
if os.environ.get("REIMTS_PURE_PYTHON") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("reimts._kernels", ["src/reimts/_kernels.pyx"], include_dirs=[np.get_include()])],
            language_level=3,
        )
    except ImportError:
        pass

setup(ext_modules=ext_modules)
