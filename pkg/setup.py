#!/usr/bin/env python
# coding: utf-8

# Copyright (c) qdesk contributors.
# Distributed under the terms of the Modified BSD License.

import os

from setuptools import setup, find_packages

pjoin = os.path.join
here = os.path.abspath(os.path.dirname(__file__))


# the name of the project
name = 'qdesk'


def get_version(path):
    """Get the version of the package from the given file by
    executing it and extracting the given `name`.
    """
    version_ns = {}
    with open(pjoin(here, path)) as f:
        exec(f.read(), {}, version_ns)
    return version_ns['__version__']


version = get_version(pjoin(name, '_version.py'))


package_data = {
    name: [
        '*.schema.json',
    ]
}


with open(pjoin(here, 'README.md')) as f:
    long_description = f.read()


setup_args = dict(
    name            = name,
    description     = "Desk-scale post-training quantization of small transformer decoders",
    long_description=long_description,
    long_description_content_type='text/markdown',
    version         = version,
    packages        = find_packages(here, exclude=['examples', 'examples.*']),
    package_data    = package_data,
    author          = 'qdesk contributors',
    license         = 'BSD',
    platforms       = "Linux, Mac OS X, Windows",
    keywords        = ['quantization', 'GPTQ', 'transformer', 'compression'],
    classifiers     = [
        'Intended Audience :: Developers',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: BSD License',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
    python_requires = '>=3.8',
)


install_requires = setup_args['install_requires'] = [
    'numpy>=1.20',
    'scipy>=1.6',
    'traitlets>=5',
    'jsonschema',
    'colorama',
]

extras_require = setup_args['extras_require'] = {
    'test': [
        'pytest>=3.6',
        'pytest-cov',
        'pytest-timeout',
    ],
}

setup_args['entry_points'] = {
    'console_scripts': [
        'qdesk = qdesk.__main__:main_dispatch',
    ]
}

if __name__ == '__main__':
    setup(**setup_args)
