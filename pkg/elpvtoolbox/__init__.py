# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection

__version__ = '0.1.0'

from .data import *
from .stats import *
from .imaging import *
from .recorder import *
from .datasets import *
from .augmentation import *
from .detection import *
from .classification import *
from .segmentation import *
from .pipeline import *
