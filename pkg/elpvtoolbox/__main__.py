# -*- coding: utf-8 -*-

# elpvtoolbox: Toolbox for EL Photovoltaic Cell Inspection
# Entry point for python -m elpvtoolbox

from .cli import main

main()
