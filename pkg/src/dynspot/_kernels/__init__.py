"""Hot kernels with a compiled fast path.

The Cython build (``_ckernels``) is used when importable; otherwise the
pure-Python twin in ``_pykernels`` is used. Set ``DYNSPOT_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
hungarian = _pykernels.hungarian
match_detections = _pykernels.match_detections

if os.environ.get("DYNSPOT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        hungarian = _ckernels.hungarian
        match_detections = _ckernels.match_detections

__all__ = ["BACKEND", "hungarian", "match_detections"]
