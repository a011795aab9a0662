"""Latent space bridging for heterogeneous-modal unsupervised domain adaptation."""
import os

# BLAS thread count changes summation order; pin it before numpy loads
_threads = os.environ.get("BRIDGESEG_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
