from setuptools import setup, find_packages

setup(
    name="odmrsim",
    version="0.1",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "numpy",
        "matplotlib",
        "tqdm",
        "torch",
        "h5py",
        "rich",
    ],
    entry_points={"console_scripts": ["odmrsim=odmrsim.cli:main"]},
    description="Lindblad simulation and analysis of phase-controlled, spin-state-selective ODMR of V_B- defects in hBN",
)
