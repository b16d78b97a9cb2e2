"""Dense float64 tensors with reverse-mode gradients.

Every tensor wraps a C-contiguous ``numpy.float64`` array.  Operations that
touch at least one gradient-tracking input record their parents and a
backward rule on the output node; :class:`Tape` linearizes that graph in
topological order when :meth:`Tensor.backward` is called.  There is no global
state, so independent graphs can be built and differentiated on separate
threads.

Weights act on the right (``x @ W``) throughout the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "GradCheckReport",
    "ParamCheck",
    "as_tensor",
    "matmul",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "silu",
    "softmax_rows",
    "tensor_sum",
    "mean",
    "square",
    "mse",
    "grad_check",
]

# Toggle for the per-op NaN/Inf scan.  Left on by default; the scan is cheap
# at desk scale and saturation in softmax/sigmoid is the usual failure site.
CHECK_FINITE = True


class ShapeError(ValueError):
    """Operand extents are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in an operation's input or output."""


def _check_finite(arr: np.ndarray, where: str) -> None:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value in {where}")


class Tensor:
    """A float64 array that can take part in gradient recording.

    ``grad`` is only ever populated on leaves with ``requires_grad=True``;
    intermediate nodes pass gradients through without storing them.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        _check_finite(arr, f"tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        out._op = op
        tracked = any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        if tracked:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Populate ``grad`` on every tracked leaf reachable from this node."""
        if not self.requires_grad:
            return
        Tape.record(self).backward()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class Tape:
    """Topologically ordered record of the graph feeding one output node."""

    output: Tensor
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; deep pipelines overflow the recursion limit otherwise
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(output, order)

    def backward(self) -> None:
        grads: dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _fmt(shape) -> str:
    return "x".join(str(s) for s in shape) or "scalar"


def _row_broadcast(a: Tensor, b: Tensor, op: str) -> bool:
    """True when ``b`` is a single row to spread over the rows of matrix ``a``."""
    if a.shape == b.shape:
        return False
    if a.data.ndim == 2 and b.shape in ((1, a.shape[1]), (a.shape[1],)):
        return True
    raise ShapeError(f"{op}: incompatible shapes {_fmt(a.shape)} and {_fmt(b.shape)}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: dimension mismatch {_fmt(a.shape)} @ {_fmt(b.shape)}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {_fmt(a.shape)}")
    return Tensor._result(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {_fmt(a.shape)} as {_fmt(shape)}")
    src = a.shape
    return Tensor._result(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(src),), "reshape")


def add(a: Tensor, b: Tensor) -> Tensor:
    bcast = _row_broadcast(a, b, "add")
    bshape = b.shape

    def backward(g):
        gb = g.sum(axis=0).reshape(bshape) if bcast else g
        return (g, gb)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    bcast = _row_broadcast(a, b, "sub")
    bshape = b.shape

    def backward(g):
        gb = -(g.sum(axis=0).reshape(bshape) if bcast else g)
        return (g, gb)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    bcast = _row_broadcast(a, b, "mul")
    ad, bd, bshape = a.data, b.data, b.shape

    def backward(g):
        ga = g * bd if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = g * ad
            if bcast:
                gb = gb.sum(axis=0).reshape(bshape)
        return (ga, gb)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    return mul(x, sigmoid(x))


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got {_fmt(x.shape)}")
    _check_finite(x.data, "softmax_rows input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._result(out, (x,), backward, "softmax_rows")


def tensor_sum(x: Tensor) -> Tensor:
    src = x.shape
    return Tensor._result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(src, float(np.reshape(g, -1)[0])),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(tensor_sum(x), 1.0 / n)


def square(x: Tensor) -> Tensor:
    return mul(x, x)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {_fmt(a.shape)} vs {_fmt(b.shape)}")
    return mean(square(sub(a, b)))


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass(frozen=True)
class ParamCheck:
    name: str
    max_rel_error: float | None
    status: str  # "pass" | "fail" | "no gradient"


@dataclass
class GradCheckReport:
    tol: float
    h: float
    checks: dict[str, ParamCheck]

    @property
    def passed(self) -> bool:
        return all(c.status != "fail" for c in self.checks.values())

    @property
    def worst(self) -> float:
        errs = [c.max_rel_error for c in self.checks.values() if c.max_rel_error is not None]
        return max(errs, default=0.0)

    def summary(self) -> str:
        lines = [f"grad_check h={self.h:g} tol={self.tol:g}"]
        for c in self.checks.values():
            err = "-" if c.max_rel_error is None else f"{c.max_rel_error:.2e}"
            lines.append(f"  {c.name:<32} {err:>10}  {c.status}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps near-zero gradients from turning f64 cancellation noise
    (about 1e-11 at h=1e-5) into spurious relative failures.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _eval_scalar(f: Callable[[], Tensor]) -> float:
    val = f()
    v = val.item() if isinstance(val, Tensor) else float(val)
    if not np.isfinite(v):
        raise NonFiniteError("grad_check: objective is not finite at the probe point")
    return v


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and must read the tensors in ``params``.  Leaves
    with ``requires_grad=False`` are reported as "no gradient" rather than as
    failures.  ``names`` restricts the check to a subset of ``params``.
    """
    selected = list(params) if names is None else list(names)
    for p in params.values():
        p.zero_grad()
    out = f()
    if not np.isfinite(out.item()):
        raise NonFiniteError("grad_check: objective is not finite at the probe point")
    out.backward()
    analytic = {n: (None if params[n].grad is None else params[n].grad.copy()) for n in selected}

    checks: dict[str, ParamCheck] = {}
    for n in selected:
        p = params[n]
        if not p.requires_grad:
            checks[n] = ParamCheck(n, None, "no gradient")
            continue
        flat = p.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_scalar(f)
            flat[i] = orig - h
            fm = _eval_scalar(f)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        a = analytic[n]
        a = np.zeros_like(flat) if a is None else a.reshape(-1)
        err = float(relative_error(a, numeric).max())
        checks[n] = ParamCheck(n, err, "pass" if err < tol else "fail")
    for p in params.values():
        p.zero_grad()
    return GradCheckReport(tol=tol, h=h, checks=checks)
