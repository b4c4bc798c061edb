"""
last
Low-rank attention side-tuning: a small trainable side-network reading the
cached hidden states of a frozen vision transformer.
"""
import sys
from setuptools import setup, find_packages

short_description = "Low-rank attention side-tuning on a frozen vision transformer.".split("\n")[0]

# from https://github.com/pytest-dev/pytest-runner#conditional-requirement
needs_pytest = {'pytest', 'test', 'ptr'}.intersection(sys.argv)
pytest_runner = ['pytest-runner'] if needs_pytest else []

try:
    with open("README.md", "r") as handle:
        long_description = handle.read()
except:
    long_description = None


setup(
    name='last',
    description=short_description,
    long_description=long_description,
    long_description_content_type="text/markdown",
    version='0.1.0',
    license='MIT',

    packages=find_packages(exclude=['examples', 'examples.*']),
    include_package_data=True,

    # Allows `setup.py test` to work correctly with pytest
    setup_requires=[] + pytest_runner,

    install_requires=[
        'numpy',
        'scipy',
        'pandas',
        'matplotlib',
        'click',
    ],
    extras_require={'test': ['pytest', 'pytest-cov']},
    entry_points={'console_scripts': ['last=last.cli:main']},
    python_requires=">=3.8",
    zip_safe=False,
)
