import platform

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # fallback kernels are used at runtime
    cythonize = None

extra_compile_args = ["-O3"]
if platform.machine().lower() in ("x86_64", "amd64"):
    extra_compile_args.append("-mpopcnt")

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "groupbnn._kernels",
                ["src/groupbnn/_kernels.pyx"],
                extra_compile_args=extra_compile_args,
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
