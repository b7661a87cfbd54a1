"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: NCHW activations, a handful of dense ops,
and a tape built from per-op backward closures.  Tensors are immutable after
construction (ops always allocate fresh output buffers), so sharing them
across threads for inference is safe.  The tape itself belongs to a single
training thread.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np


class TensorError(ValueError):
    """Shape, dtype or value validation failure in a tensor operation."""


class AutodiffError(RuntimeError):
    """Misuse of the gradient tape (e.g. backward called twice)."""


DTYPE_TOKENS = {"f32": np.float32, "f64": np.float64, "u8": np.uint8}
_TOKEN_OF = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64",
             np.dtype(np.uint8): "u8"}

# When enabled, every op output is checked for NaN/Inf.  Off by default so the
# hot training loop pays nothing; the trainer watches the loss instead.
_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


class Tensor:
    """N-dimensional float array plus an optional autodiff node.

    ``requires_grad`` marks a leaf parameter; outputs of ops on such tensors
    carry backward closures.  ``grad`` stays ``None`` until ``backward``
    deposits into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if any(d < 1 for d in arr.shape):
            raise TensorError(f"all dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- construction of non-leaf nodes (used by ops) -----------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        if _FINITE_CHECKS and not np.all(np.isfinite(data)):
            raise TensorError(f"non-finite values produced by op '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        track = any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={_TOKEN_OF.get(self.dtype, self.dtype)}, op={self.op})"

    # -- autodiff -------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar loss.

        Accumulates into ``.grad`` of every reachable requires_grad tensor.
        The tape is consumed: a second call on the same graph raises.
        """
        if self.data.size != 1:
            raise AutodiffError("backward() requires a scalar loss tensor")
        if not self.requires_grad:
            raise AutodiffError("loss does not depend on any requires_grad tensor")
        if self._backward is None and self._parents:
            raise AutodiffError("backward() already ran on this graph; rebuild the graph before calling again")
        if not self._parents:
            # a bare leaf: gradient of itself
            if self._backward is None and self.op != "leaf":
                raise AutodiffError("backward() already ran on this graph; rebuild the graph before calling again")
            self.grad = _accum(self.grad, np.ones_like(self.data))
            return

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = _accum(self.grad, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._backward = None  # release closure, marks tape consumed
            if node._parents:
                node.grad = None  # intermediate grads are not retained

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TensorError("tensor/tensor division not supported")
        return mul(self, 1.0 / other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self):
        return sum_all(self)

    def mean(self, axis=None):
        return mean(self, axis)

    def relu(self):
        return relu(self)


def _accum(grad: Optional[np.ndarray], delta: np.ndarray) -> np.ndarray:
    # first deposit copies: the same delta array may be handed to two parents,
    # and later in-place accumulation must not corrupt the sibling's gradient
    if grad is None:
        return np.array(delta, copy=True)
    grad += delta
    return grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise and structural ops --------------------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise TensorError("add needs at least one tensor")
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        out = a.data + np.asarray(b, dtype=a.dtype)

        def bwd(g, a=a):
            if a.requires_grad:
                a.grad = _accum(a.grad, g)

        return Tensor._result(out, (a,), bwd, "add_scalar")
    if not isinstance(a, Tensor):
        return add(b, a)
    if a.data.dtype != b.data.dtype:
        raise TensorError(f"dtype mismatch in add: {a.dtype} vs {b.dtype}")
    try:
        out = a.data + b.data
    except ValueError as e:
        raise TensorError(f"shape mismatch in add: {a.shape} vs {b.shape}") from e

    def bwd(g, a=a, b=b):
        if a.requires_grad:
            a.grad = _accum(a.grad, _unbroadcast(g, a.shape))
        if b.requires_grad:
            b.grad = _accum(b.grad, _unbroadcast(g, b.shape))

    return Tensor._result(out, (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return mul(b, a)
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise TensorError(f"shape mismatch in mul: {a.shape} vs {b.shape}")
        out = a.data * b.data

        def bwd(g, a=a, b=b):
            if a.requires_grad:
                a.grad = _accum(a.grad, g * b.data)
            if b.requires_grad:
                b.grad = _accum(b.grad, g * a.data)

        return Tensor._result(out, (a, b), bwd, "mul")

    scalar = float(b)
    out = a.data * a.dtype.type(scalar)

    def bwd(g, a=a, scalar=scalar):
        if a.requires_grad:
            a.grad = _accum(a.grad, g * scalar)

    return Tensor._result(out, (a,), bwd, "mul_scalar")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g, x=x, mask=out > 0):
        if x.requires_grad:
            x.grad = _accum(x.grad, g * mask)

    return Tensor._result(out, (x,), bwd, "relu")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    out = x.data.reshape(shape)

    def bwd(g, x=x):
        if x.requires_grad:
            x.grad = _accum(x.grad, g.reshape(x.shape))

    return Tensor._result(out, (x,), bwd, "reshape")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows along the leading axis; repeated indices duplicate rows.

    Backward scatter-adds, so duplication sums the incoming gradients.
    """
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise TensorError("gather_rows index must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise TensorError(f"gather_rows index out of range for axis of size {x.shape[0]}")
    out = x.data[idx]

    def bwd(g, x=x, idx=idx):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, idx, g)
            x.grad = _accum(x.grad, dx)

    return Tensor._result(out, (x,), bwd, "gather_rows")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype).reshape(())

    def bwd(g, x=x):
        if x.requires_grad:
            x.grad = _accum(x.grad, np.full_like(x.data, g))

    return Tensor._result(out, (x,), bwd, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = x.data.size
        out = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype).reshape(())

        def bwd(g, x=x, n=n):
            if x.requires_grad:
                x.grad = _accum(x.grad, np.full_like(x.data, g / n))

        return Tensor._result(out, (x,), bwd, "mean")

    axis = int(axis)
    n = x.shape[axis]
    out = x.data.mean(axis=axis, dtype=np.float64).astype(x.dtype)

    def bwd(g, x=x, axis=axis, n=n):
        if x.requires_grad:
            x.grad = _accum(x.grad, np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    return Tensor._result(out, (x,), bwd, "mean_axis")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with 64-bit accumulation."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = (a.data.astype(np.float64) @ b.data.astype(np.float64)).astype(a.dtype)

    def bwd(g, a=a, b=b):
        g64 = g.astype(np.float64)
        if a.requires_grad:
            a.grad = _accum(a.grad, (g64 @ b.data.astype(np.float64).T).astype(a.dtype))
        if b.requires_grad:
            b.grad = _accum(b.grad, (a.data.astype(np.float64).T @ g64).astype(b.dtype))

    return Tensor._result(out, (a, b), bwd, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Dense layer: ``x @ weight.T + bias`` with weight shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise TensorError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}")
    out = matmul(x, transpose2d(weight))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise TensorError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
        out = add(out, bias)
    return out


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise TensorError("transpose2d expects a 2-D tensor")
    out = x.data.T.copy()

    def bwd(g, x=x):
        if x.requires_grad:
            x.grad = _accum(x.grad, g.T)

    return Tensor._result(out, (x,), bwd, "transpose2d")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax.  Inference-only: the result is detached
    from the tape (training uses the fused cross-entropy loss instead)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor(out.astype(x.dtype))


# -- binary tensor file ("v1" format) -------------------------------------------
#
#   v1 <dtype> <ndim> <d0> <d1> ...\n
#   followed by little-endian raw element bytes.


def save_array(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in (np.float32, np.float64, np.uint8):
        raise TensorError(f"unsupported dtype for tensor file: {arr.dtype}")
    token = _TOKEN_OF[arr.dtype]
    header = "v1 {} {} {}\n".format(token, arr.ndim, " ".join(str(d) for d in arr.shape))
    if arr.ndim == 0:
        header = f"v1 {token} 0\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if arr.dtype == np.uint8:
            f.write(arr.tobytes())
        else:
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").strip()
        payload = f.read()
    return decode_array(header, payload)


def decode_array(header: str, payload: bytes) -> np.ndarray:
    parts = header.split()
    if len(parts) < 3 or parts[0] != "v1":
        raise TensorError(f"bad tensor file header: {header!r}")
    token, ndim_s = parts[1], parts[2]
    if token not in DTYPE_TOKENS:
        raise TensorError(f"unknown dtype token {token!r} in tensor file header")
    try:
        ndim = int(ndim_s)
        dims = [int(d) for d in parts[3:]]
    except ValueError as e:
        raise TensorError(f"malformed tensor file header: {header!r}") from e
    if len(dims) != ndim:
        raise TensorError(f"header declares ndim={ndim} but lists {len(dims)} dims")
    if any(d < 1 for d in dims):
        raise TensorError(f"tensor file dims must be >= 1, got {dims}")
    dtype = np.dtype(DTYPE_TOKENS[token]).newbyteorder("<")
    count = 1
    for d in dims:
        count *= d
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise TensorError(
            f"tensor file payload is {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr.astype(DTYPE_TOKENS[token])


def save_tensor(path, t: Tensor) -> None:
    save_array(path, t.data)


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    arr = load_array(path)
    if arr.dtype == np.uint8:
        raise TensorError("u8 tensor files hold raw image data, not float tensors")
    return Tensor(arr, requires_grad=requires_grad)


# -- deterministic, name-keyed initialisation -----------------------------------
#
# Drawing each parameter from an RNG keyed by (seed, name) keeps two builds of
# different variants bit-identical on their shared layers, which the
# TAM-transparency and determinism checks rely on.

import zlib


def named_rng(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(f"{seed}:{name}".encode("utf-8"))
    return np.random.Generator(np.random.PCG64((int(seed) << 32) ^ key))


def seeded_normal(seed: int, name: str, shape, std: float, dtype=np.float32) -> np.ndarray:
    rng = named_rng(seed, name)
    return (rng.standard_normal(shape) * std).astype(dtype)
