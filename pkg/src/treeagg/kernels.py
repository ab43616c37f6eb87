"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; otherwise (or when
``TREEAGG_PURE_PYTHON=1``) the NumPy fallback is used. Both expose the same
functions with the same semantics.
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("TREEAGG_PURE_PYTHON") != "1":
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

agglomerate = _impl.agglomerate
cd_lasso = _impl.cd_lasso
admm_run = _impl.admm_run
tree_project = _impl.tree_project


def backends():
    """Return the available backends as a name -> module mapping."""
    out = {"python": python_backend}
    if compiled_backend is not None:
        out["cython"] = compiled_backend
    return out
