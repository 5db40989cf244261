import codecs
import os
from setuptools import setup, find_packages

dirname = os.path.dirname(__file__)

long_description = (
    codecs.open(os.path.join(dirname, "README.md"), encoding="utf-8").read()
    + "\n"
    + codecs.open(os.path.join(dirname, "CHANGELOG.md"), encoding="utf-8").read()
)

setup(
    name="hybridca",
    version="0.1.0",
    description="Hybrid convolution-attention models (Transformer and Hopfield) for lesion severity scoring",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "tests.*"]),
    scripts=[],
    package_data={
        "hybridca": ["config/*.yaml"],
    },
    include_package_data=True,
    python_requires=">=3.10",
    install_requires=[
        "numpy",
        "scipy",
        "pyyaml",
        "pandas",
        "schema",
        "tabulate",
        "pandera",
        "click",
        "loguru",
    ],
    setup_requires=[],
    tests_require=["pytest", "pytest-console_scripts", "hypothesis"],
    extras_require={"test": ["pytest", "pytest-console_scripts", "hypothesis"]},
    entry_points={
        "console_scripts": [
            "hca=hybridca.scripts.top_level_cli:cli",
        ]
    },
)
