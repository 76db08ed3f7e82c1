from setuptools import find_packages, setup

setup(name='beamsight',
      version='1.0',
      packages=find_packages(exclude=['tests', 'tests.*']),
      python_requires='>=3.10',
      install_requires=[
          "filterpy",
          "Jinja2",
          "ndjson",
          "numpy",
          "pandas",
          "parse",
          "scipy",
          "torch"],
      entry_points={
          'console_scripts': ['beamsight=beamsight.cli:main'],
      })
