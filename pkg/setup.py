from setuptools import find_packages, setup

setup(
    name="fuselvm",
    version="0.1.0",
    packages=find_packages(exclude=["examples", "examples.*"]),
    zip_safe=False,
    include_package_data=True,
    package_data=dict(fuselvm=["presets.yml"]),
    install_requires=[
        "filelock",
        "numpy",
        "pandas",
        "pydantic>=1.10,<2",
        "pyyaml",
        "scikit-learn",
        "scipy",
        "pytest",
    ],
    entry_points=dict(
        console_scripts=[
            "fuselvm = fuselvm.cli:run",
        ],
    ),
)
