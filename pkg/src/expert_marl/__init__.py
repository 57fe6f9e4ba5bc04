"""QMIX with uncertainty-gated expert exploration on a cooperative navigation task."""
import os

# The networks are tiny; multithreaded BLAS only adds overhead.  Has no effect
# if numpy was imported first.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

__version__ = "0.1.0"
