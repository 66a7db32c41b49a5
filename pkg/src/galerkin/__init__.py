"""Galerkin FEM/BEM assembly with hierarchical matrices."""

import os

# prefer a threading layer that does not probe the (possibly outdated) TBB
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
if os.environ.get("GALERKIN_THREADS"):
    os.environ.setdefault("NUMBA_NUM_THREADS", os.environ["GALERKIN_THREADS"])

__version__ = "0.1.0"
