from setuptools import setup, find_packages

setup(
    name="modnet-cli",
    version="1.0.0",
    description="MODNet CLI — Multi-offset point-cloud denoising toolchain",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=("tests",)),
    python_requires=">=3.8",
    install_requires=["numpy>=1.20", "scipy>=1.6"],
    extras_require={
        "test": ["pytest>=7"],
    },
    entry_points={
        "console_scripts": [
            "modnet=modnet_cli.cli:main",
        ],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
)
