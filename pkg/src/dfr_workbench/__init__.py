"""
DFR Workbench - last-layer feature reweighting on a synthetic spurious-correlation benchmark.
"""

__version__ = "0.1.0"
