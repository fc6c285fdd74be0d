"""Kernel backend selection.

The compiled extension is preferred when importable; FLASHSIM_BACKEND=py or
FLASHSIM_BACKEND=c forces a choice (forcing c fails loudly if the extension
is missing). Both backends expose run_trajectory_kernel and philox_raw with
identical contracts.
"""

from __future__ import annotations

import os

from . import _kernels_py

_FORCED = os.environ.get("FLASHSIM_BACKEND", "").strip().lower()

if _FORCED in ("py", "python", "pure"):
    _impl = _kernels_py
    BACKEND_NAME = "pure"
elif _FORCED in ("c", "compiled", "ext"):
    from . import _kernels as _impl

    BACKEND_NAME = "compiled"
elif _FORCED:
    raise ValueError(f"FLASHSIM_BACKEND must be 'py' or 'c', got {_FORCED!r}")
else:
    try:
        from . import _kernels as _impl

        BACKEND_NAME = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND_NAME = "pure"

run_trajectory_kernel = _impl.run_trajectory_kernel
philox_raw = _impl.philox_raw


def get_backend() -> str:
    return BACKEND_NAME
