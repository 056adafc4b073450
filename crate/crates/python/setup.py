"""Builds the relurepair_rs extension module by driving cargo directly."""

import json
import shutil
import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

CRATE_DIR = Path(__file__).resolve().parent


def cargo_target_dir() -> Path:
    metadata = subprocess.run(
        ["cargo", "metadata", "--format-version", "1", "--no-deps"],
        cwd=CRATE_DIR,
        check=True,
        capture_output=True,
        text=True,
    )
    return Path(json.loads(metadata.stdout)["target_directory"])


class CargoBuildExt(build_ext):
    def build_extension(self, ext: Extension) -> None:
        subprocess.run(
            [
                "cargo",
                "build",
                "--release",
                "-p",
                "relurepair-python",
                "--features",
                "extension-module",
            ],
            cwd=CRATE_DIR,
            check=True,
        )
        release = cargo_target_dir() / "release"
        suffix = "dylib" if sys.platform == "darwin" else "so"
        built = release / f"librelurepair_rs.{suffix}"
        if not built.is_file():
            raise FileNotFoundError(f"cargo did not produce {built}")
        out = Path(self.get_ext_fullpath(ext.name))
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built, out)


setup(
    ext_modules=[Extension("relurepair_rs", sources=[])],
    cmdclass={"build_ext": CargoBuildExt},
)
