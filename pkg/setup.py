from setuptools import setup

setup(
    name="PyLime",
    version="0.1.0",
    description="a from-scratch transformer with layer-integrated key-value routing, synthetic reasoning tasks and collapse diagnostics",
    license="MIT",
    packages=["pylime", "tests"],
    install_requires=["numpy", "scipy", "tqdm"],
    extras_require={"tests": []},
    python_requires=">=3.10",
    entry_points={"console_scripts": ["pylime=pylime.cli:main"]},
)
