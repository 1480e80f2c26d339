#!/usr/bin/env python

from setuptools import setup, find_packages

setup(name='cmt-da',
      version='0.1',
      packages=find_packages(exclude=['tests']),
      install_requires=['jsonargparse', 'numpy', 'pandas', 'PyYAML', 'simpy', 'tqdm'],
      package_data={'cmt_da': ['conf/*.json']},
      entry_points={'console_scripts': ['cmt-da=cmt_da.cli:main']},
     )
