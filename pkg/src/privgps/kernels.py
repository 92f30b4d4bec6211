"""Backend selection for the randomized-response hot loops.

The compiled extension is used when it imports; set ``PRIVGPS_PURE=1`` to
force the pure-Python fallback. Both produce identical outputs for a given
bit generator state.
"""

import os

BACKEND = "python"

if not os.environ.get("PRIVGPS_PURE"):
    try:
        from privgps._kernels import rr_bits, rr_counts

        BACKEND = "compiled"
    except ImportError:
        pass

if BACKEND == "python":
    from privgps._kernels_py import rr_bits, rr_counts  # noqa: F811

__all__ = ["BACKEND", "rr_bits", "rr_counts"]
