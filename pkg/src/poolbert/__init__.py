"""Small BERT-style text classification stack built on a from-scratch
reverse-mode autodiff tensor core.

Setting the environment variable ``POOLBERT_THREADS=0`` before importing this
package pins the BLAS thread pools to a single thread so that repeated runs
produce bitwise-identical artifacts.
"""

import os

if os.environ.get("POOLBERT_THREADS", "") in ("0", "1"):
    # Must happen before numpy is first imported anywhere in the process.
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
