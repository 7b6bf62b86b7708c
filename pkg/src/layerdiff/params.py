"""Named parameter storage and gradient utilities."""

from __future__ import annotations

from typing import Callable, Dict, Iterator, Tuple

import numpy as np

from .tensor import ShapeError, Tensor


class ParamStore:
    """Map from hierarchical names ("level1.in_conv.weight") to parameters.

    Each parameter is a leaf Tensor with requires_grad set; its .grad slot
    is populated by backward() and overwritten on the next call.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def num_values(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter in state: {name}")
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ShapeError(
                    f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}"
                )
            p.data = arr.astype(self.dtype).copy()

    def grad_norm(self) -> float:
        total = 0.0
        for p in self._params.values():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))


def backward(loss: Tensor, params: ParamStore) -> None:
    """Populate each parameter's gradient with d(loss)/d(param).

    Parameters not reachable from the loss get an exact zero gradient.
    Gradients from a previous call are overwritten.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.backward_graph()
    for _, p in params.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    h: float = 1e-5,
    max_coords_per_param: int = 8,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to max_coords_per_param coordinates per parameter. The
    relative error is |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if rng is None:
        rng = np.random.default_rng(0)

    loss = f(params)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("f produced a non-finite loss")
    backward(loss, params)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + h
            lo_hi = float(f(params).data)
            flat[idx] = orig - h
            lo_lo = float(f(params).data)
            flat[idx] = orig
            numeric = (lo_hi - lo_lo) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[idx])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
