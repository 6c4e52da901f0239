"""Builds the Rust extension with cargo and drops the cdylib where
setuptools expects the module. SOMNIVIT_PY_PROFILE=dev reuses the debug
cache for quicker iteration."""

import json
import os
import shutil
import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

CRATE_DIR = Path(__file__).resolve().parent


class CargoExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CargoBuild(build_ext):
    def build_extension(self, ext):
        profile = os.environ.get("SOMNIVIT_PY_PROFILE", "release")
        subprocess.run(
            ["cargo", "build", "--profile", profile, "-p", "somnivit-py"],
            cwd=CRATE_DIR,
            check=True,
        )
        metadata = json.loads(
            subprocess.run(
                ["cargo", "metadata", "--format-version", "1", "--no-deps"],
                cwd=CRATE_DIR,
                check=True,
                capture_output=True,
            ).stdout
        )
        profile_dir = "debug" if profile == "dev" else profile
        suffix = ".dylib" if sys.platform == "darwin" else ".so"
        built = Path(metadata["target_directory"]) / profile_dir / f"libsomnivit_py{suffix}"
        out = Path(self.get_ext_fullpath(ext.name))
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built, out)


setup(
    ext_modules=[CargoExtension("somnivit_py")],
    cmdclass={"build_ext": CargoBuild},
)
