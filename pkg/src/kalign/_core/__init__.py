"""Backend selection for the hot pair-loss kernel.

The compiled extension is preferred when importable; the numpy fallback
is always available. KALIGN_CORE=python|cython forces a choice (cython
then fails loudly if the extension is missing).
"""

import os

_forced = os.environ.get("KALIGN_CORE", "").strip().lower()

if _forced == "python":
    from ._pairs_py import norm_poly_pair_pass
    BACKEND = "python"
elif _forced in ("", "cython"):
    try:
        from ._pairs_cy import norm_poly_pair_pass  # type: ignore[import-not-found]
        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise
        from ._pairs_py import norm_poly_pair_pass
        BACKEND = "python"
else:
    raise ImportError(f"KALIGN_CORE must be 'python' or 'cython', got {_forced!r}")

__all__ = ["norm_poly_pair_pass", "BACKEND"]
