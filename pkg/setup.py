from setuptools import setup

setup(
    # ...,
    name="fedlab",
    version="0.1.0",
    packages=["fedlab", "fedlab.nn"],
    description="A desk-scale laboratory for backdoor attacks and defenses in federated learning",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
    setup_requires=["pytest-runner"],
    install_requires=["numpy>=1.20", "scipy>=1.6", "pint", "pyyaml"],
    tests_require=["pytest", "hypothesis"],
    entry_points={"console_scripts": ["fedlab=fedlab.cli:main"]},
    # ...,
)
