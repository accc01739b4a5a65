"""
Generalized Snell envelopes on a recombining binomial tree.

The envelope of (L, l, delta, xi) is the smallest supermartingale above the lower barrier
L, above the obstacle l wherever the measure delta charges, and above xi at the horizon.
It is computed as the increasing limit of penalized reflected BSDEs and certified by
Skorokhod, minimality and smallest-in-class checks. The cli module runs scenarios and
property suites and writes CSV/JSON results.
"""

import sys
from pathlib import Path

# Insert pythonpath into the front of the PATH environment variable, before importing anything from project/
pythonpath = str(Path(__file__).parent.parent)
try:
    sys.path.index(pythonpath)
except ValueError:
    sys.path.insert(0, pythonpath)
