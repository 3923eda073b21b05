import os
import sys

# make sibling helper modules (oracles.py) importable from any rootdir
sys.path.insert(0, os.path.dirname(__file__))
