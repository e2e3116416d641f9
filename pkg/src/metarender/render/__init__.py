"""Path tracing, image I/O and random streams."""
import os

import numba

# the default TBB layer is not always present; workqueue ships with numba
numba.config.THREADING_LAYER = "workqueue"


def configure_threads(n: int | None = None) -> int:
    """Set numba and torch thread counts from ``n`` or the MRD_THREADS variable."""
    import torch

    if n is None:
        n = int(os.environ.get("MRD_THREADS", "0")) or os.cpu_count() or 1
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    torch.set_num_threads(n)
    return n
