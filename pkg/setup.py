import pathlib
from setuptools import setup

# The directory containing this file
HERE = pathlib.Path(__file__).parent

# The text of the README file
README = (HERE / "README.md").read_text()

# This call to setup() does all the work
setup(
    name="krfws",
    version="0.1.0",
    description="Face alignment and head pose estimation with K-cluster regression forests with weighted splitting.",
    long_description=README,
    long_description_content_type="text/markdown",
    license="GPLv3",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "License :: OSI Approved :: GNU General Public License v3 (GPLv3)",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
    packages=["krfws"],
    include_package_data=True,
    package_data={"krfws": ["data/*.txt"]},
    python_requires=">=3.8",
    install_requires=["numpy", "scipy", "pandas", "opencv-python", "scikit-learn", "joblib"],
    extras_require={"tests": ["pytest"]},
    entry_points={"console_scripts": ["krfws=krfws.cli:main"]},
)
