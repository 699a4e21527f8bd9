"""Setup script for tune-mbrl."""

from setuptools import setup, find_packages
from pathlib import Path

# Read README
readme_file = Path(__file__).parent / "README.md"
long_description = readme_file.read_text() if readme_file.exists() else ""

setup(
    name="tune-mbrl",
    version="0.1.0",
    description="Static and dynamic hyperparameter tuners for model-based reinforcement learning",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    package_data={"tune_mbrl": ["spaces/*.space"]},
    python_requires=">=3.10",
    install_requires=[
        "click>=8.0.0",
        "tomli-w>=1.0.0",
        "tomli>=2.0.0; python_version<'3.11'",
        "PyYAML>=6.0",
        "numpy>=1.22",
        "scipy>=1.8",
    ],
    # Optional dependencies
    extras_require={
        "dev": ["pytest", "black", "flake8"],
    },
    entry_points={
        "console_scripts": [
            "tune-mbrl=tune_mbrl.cli:main",
        ],
    },
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
    ],
)
