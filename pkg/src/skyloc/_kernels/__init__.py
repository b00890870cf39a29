"""Hot-kernel backend selection.

Prefers the compiled Cython extension; falls back to the vectorized numpy
implementation when the extension is not built or when the environment
variable ``SKYLOC_PURE_PYTHON`` is set to a non-empty value.  Both backends
implement the same three functions with identical semantics.
"""

import os

from . import numpy_impl

if os.environ.get("SKYLOC_PURE_PYTHON"):
    _impl = numpy_impl
    HAVE_NATIVE = False
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        HAVE_NATIVE = True
    except ImportError:
        _impl = numpy_impl
        HAVE_NATIVE = False

ACTIVE_BACKEND = "native" if HAVE_NATIVE else "numpy"

soft_detection_components = _impl.soft_detection_components
hard_detect_mask = _impl.hard_detect_mask
pairwise_sqdist = _impl.pairwise_sqdist
