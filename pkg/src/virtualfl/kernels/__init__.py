"""Fused numerical kernels with a compiled fast path.

The Cython extension ``_ckernels`` is used when it was built; otherwise the
NumPy implementation in ``_pykernels`` is selected. Set the environment
variable ``VIRTUALFL_KERNELS=python`` to force the fallback.

All public functions accept arbitrary float64-convertible arrays and return
fresh arrays; shapes follow the NumPy reference.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def _select() -> tuple[str, ModuleType]:
    wanted = os.environ.get("VIRTUALFL_KERNELS", "").strip().lower()
    if wanted == "python" or _ckernels is None:
        return "python", _pykernels
    return "cython", _ckernels


BACKEND, _impl = _select()


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def _rows(a: np.ndarray, width: int) -> np.ndarray:
    # explicit row count: reshape(-1, 0) is ambiguous for empty parameter vectors
    return a.reshape(int(np.prod(a.shape[:-1], dtype=np.int64)) if a.ndim > 1 else 1, width)


class Kernels:
    """Shape-normalizing front end over one backend module."""

    def __init__(self, name: str, impl: ModuleType):
        self.name = name
        self._impl = impl

    def softplus(self, x):
        x = _f64(x)
        return self._impl.softplus(x.reshape(-1)).reshape(x.shape)

    def sigmoid(self, x):
        x = _f64(x)
        return self._impl.sigmoid(x.reshape(-1)).reshape(x.shape)

    def reparam_forward(self, mu, rho, eps):
        eps = _f64(eps)
        squeeze = eps.ndim == 1
        out = self._impl.reparam_forward(_f64(mu), _f64(rho), _rows(eps, eps.shape[-1]))
        return out[0] if squeeze else out.reshape(eps.shape)

    def reparam_backward(self, rho, eps, grad):
        eps = _f64(eps)
        width = eps.shape[-1]
        grad = _f64(grad)
        return self._impl.reparam_backward(_f64(rho), _rows(eps, width), _rows(grad, width))

    def gauss_kl(self, mu, rho, target_mean, target_var) -> float:
        return float(self._impl.gauss_kl(_f64(mu), _f64(rho), _f64(target_mean), _f64(target_var)))

    def gauss_kl_grad(self, mu, rho, target_mean, target_var):
        return self._impl.gauss_kl_grad(_f64(mu), _f64(rho), _f64(target_mean), _f64(target_var))

    def softmax_xent(self, logits, labels):
        logits = _f64(logits)
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        return self._impl.softmax_xent(logits, labels)


def get(name: str | None = None) -> Kernels:
    """Return a kernel front end; ``None`` means the import-time selection."""
    if name is None:
        return _active
    if name == "python":
        return Kernels("python", _pykernels)
    if name == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        return Kernels("cython", _ckernels)
    raise ValueError(f"unknown kernel backend {name!r}")


_active = Kernels(BACKEND, _impl)
_EXPORTS = ("softplus", "sigmoid", "reparam_forward", "reparam_backward", "gauss_kl", "gauss_kl_grad", "softmax_xent")


def _bind(k: Kernels) -> None:
    g = globals()
    for name in _EXPORTS:
        g[name] = getattr(k, name)


def use(name: str) -> str:
    """Switch the process-wide backend; returns the previous backend name."""
    global _active, BACKEND
    previous = BACKEND
    _active = get(name)
    BACKEND = _active.name
    _bind(_active)
    return previous


_bind(_active)
