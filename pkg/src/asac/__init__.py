"""Vision transformer with a vector-quantized attention controller.

Subpackages: ``tensor`` (autodiff engine), ``controller`` (VQ codebook),
``attention``/``model`` (the transformer), ``losses``, ``data``
(synthetic shape tasks), ``train`` (optimizer, attacks, protocols),
``analysis`` (codebook statistics), ``cli``.
"""

import os

# Pin BLAS thread pools before numpy loads so repeated runs are
# bit-deterministic; override with ASAC_THREADS=<n>.
_threads = os.environ.get("ASAC_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
