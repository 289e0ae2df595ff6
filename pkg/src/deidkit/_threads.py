"""Map ``DEID_THREADS`` onto the BLAS/OpenMP thread variables.

Must run before numpy is first imported to take effect.
"""

_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")


def apply_cap(environ) -> int | None:
    raw = environ.get("DEID_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        return None
    if n < 1:
        return None
    for var in _VARS:
        environ[var] = str(n)
    return n
