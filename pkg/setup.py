# pip install setuptools twine
# python setup.py sdist bdist_wheel
# twine upload --repository testpypi dist/*
import os.path
import codecs  # To use a consistent encoding
from setuptools import setup, find_packages

here = os.path.abspath(os.path.dirname(__file__))

# Get the long description from the relevant file
with codecs.open(os.path.join(here, 'README.md'), encoding='utf-8') as f:
    long_description = f.read()

setup(name='stackwfa',
      version='1.0.0',
      license='MIT License',
      description='Renormalizing nondeterministic stack RNNs: stack WFA simulation, CFL tasks and training',
      long_description=long_description,
      long_description_content_type='text/markdown',
      packages=find_packages(exclude=['docs', 'examples', 'tests', 'ExperimentExamples']),
      install_requires=['torch', 'numpy', 'pandas', 'matplotlib'],
      extras_require={'test': ['pytest']},
      entry_points={'console_scripts': ['stackwfa=stackwfa.cli:main']},
      classifiers=[
          # How mature is this project? Common values are
          #   3 - Alpha
          #   4 - Beta
          #   5 - Production/Stable
          'Development Status :: 4 - Beta',

          # Indicate who your project is intended for
          'Intended Audience :: Science/Research',

          # Indicate which Topics are covered by the package
          'Topic :: Scientific/Engineering :: Artificial Intelligence',

          'Programming Language :: Python :: 3.9',
          'Programming Language :: Python :: 3.10',
          'Programming Language :: Python :: 3.11',
          'License :: OSI Approved :: MIT License',
          'Operating System :: OS Independent'
      ],
      keywords=['pushdown automata', 'stack rnn', 'formal languages', 'language modeling'],
      python_requires='>=3.9'
      )
