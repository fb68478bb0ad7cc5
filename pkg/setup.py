import setuptools

setuptools.setup(
    name="roicodec",
    description="ROI-aware neural video compression on a scale-space-flow codec",
    version="1.0.0",
    packages=setuptools.find_packages(exclude=["tests", "tests.*"]),
    package_data={"roicodec.common": ["logging_config.json"]},
    python_requires=">=3.9",
    install_requires=[
        "numpy",
        "scipy>=1.10",
        "pandas",
        "matplotlib",
        "Pillow",
        "pytest",
        "pytest-asyncio",
    ],
    entry_points={"console_scripts": ["roicodec = roicodec.cli:main"]},
)
