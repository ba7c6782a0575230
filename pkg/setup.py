import setuptools

with open('README.md', 'r') as rf:
    readme = rf.read()

setuptools.setup(
    name='elpvtoolbox',
    version='0.1.0',
    description='Toolbox for detection, classification and segmentation of defective cells in EL images of PV panels',
    long_description=readme,
    long_description_content_type='text/markdown',
    license='MIT',
    packages=setuptools.find_packages(exclude=['tests', 'examples', 'examples.*']),
    python_requires='>=3.8',
    install_requires=[
        'numpy',
        'pandas',
        'matplotlib',
        'torch>=1.13',
        'torchvision>=0.14',
        'albumentations>=1.3',
        'opencv-python-headless',
        'scikit-image',
        'Pillow',
    ],
    entry_points={
        'console_scripts': ['elpvtoolbox=elpvtoolbox.cli:main'],
    },
    zip_safe=True,
    classifiers=[
        'License :: OSI Approved :: MIT License',
        'Intended Audience :: Science/Research',
        'Operating System :: OS Independent',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Image Recognition',
    ],
    )
