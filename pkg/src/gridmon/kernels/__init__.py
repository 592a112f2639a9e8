"""Record codec / aggregation kernels with backend selection.

Prefers the compiled Cython extension, falls back to the pure-Python
implementation when the extension is not built.  Set GRIDMON_PURE_PYTHON=1
to force the fallback.  Both backends produce identical bytes and floats;
`gridmon bench --kernels` compares their throughput.
"""

import os

from gridmon.kernels import pure

if os.environ.get("GRIDMON_PURE_PYTHON"):
    _backend = pure
else:
    try:
        from gridmon.kernels import _ckernels as _backend  # type: ignore[no-redef]
    except ImportError:
        _backend = pure

BACKEND = _backend.NAME
RECORD_SIZE = _backend.RECORD_SIZE

pack_record = _backend.pack_record
pack_records = _backend.pack_records
unpack_record = _backend.unpack_record
unpack_records = _backend.unpack_records
aggregate_values = _backend.aggregate_values


def available_backends():
    """All importable backend modules, compiled first."""
    backends = []
    try:
        from gridmon.kernels import _ckernels

        backends.append(_ckernels)
    except ImportError:
        pass
    backends.append(pure)
    return backends
