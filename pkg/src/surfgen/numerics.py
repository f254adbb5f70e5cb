"""Small dense-tensor library with tape-based reverse-mode gradients.

Only the primitives needed by the denoising transformer are provided. Every op
works on numpy arrays wrapped in :class:`Tensor`; when a :class:`GradTape` is
active and at least one input requires a gradient, the op appends a record with
its backward closure to the tape.
"""

from __future__ import annotations

import contextlib
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

_DEFAULT_DTYPE = [np.float32]
_TAPES: list["GradTape"] = []


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used when wrapping raw data in a Tensor."""
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    """Immutable array plus gradient bookkeeping.

    ``data`` is only ever modified in place by the optimizer.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # op outputs keep the dtype numpy produced
        # finiteness is enforced on leaves and on scalar reductions only; a full
        # scan after every op costs more than the op itself at this scale
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Ordered op record. Use as a context manager to make it active."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def _active_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.records.append(_Record(out, inputs, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # (..., k) @ (k, n): fold leading dims so BLAS sees one large GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit(out, (a, b), backward)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} and {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _emit(a.data * b.data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh form."""
    x = as_tensor(x)
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    u = c * (xd + k * xd * xd * xd)
    th = np.tanh(u)
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        du = c * (1.0 + 3.0 * k * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return _emit(out.astype(xd.dtype, copy=False), (x,), backward)


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match {x.shape}")
    dt = x.data.dtype
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(dt)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=np.float64)
    rstd = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = gg = gb = None
        red = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = rstd * (dxhat - m1 - xhat * m2)
        return gx, gg, gb

    return _emit(out, (x, gamma, beta), backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.data.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise ShapeError("concat: nothing to concatenate")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if x.requires_grad else None for p, x in zip(parts, xs))

    return _emit(out, xs, backward)


def index(x, idx) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis, None)."""
    x = as_tensor(x)
    out = x.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _emit(np.ascontiguousarray(out), (x,), backward)


def _finite_scalar(v: np.ndarray) -> np.ndarray:
    if not np.isfinite(v):
        raise NonFiniteError("reduction produced a non-finite value")
    return v


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = _finite_scalar(np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype))
    return _emit(out, (x,), lambda g: (np.full_like(x.data, g),))


def mse(a, b=None) -> Tensor:
    """Mean of squared differences (mean square of ``a`` if ``b`` is None)."""
    a = as_tensor(a)
    if b is None:
        diff = a.data
        inputs = (a,)
    else:
        b = as_tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
        diff = a.data - b.data
        inputs = (a, b)
    n = diff.size
    with np.errstate(over="ignore"):  # an overflowing cast is reported as non-finite just below
        out = _finite_scalar(np.asarray(np.mean(np.square(diff, dtype=np.float64)), dtype=a.data.dtype))

    def backward(g):
        ga = (2.0 / n) * g * diff
        if b is None:
            return (ga,)
        return (ga if a.requires_grad else None, -ga if b.requires_grad else None)

    return _emit(out, inputs, backward)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: GradTape | None = None) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse and return gradients of every tensor that needs one.

    Leaf gradients are also accumulated into ``Tensor.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or _active_tape()
    if tape is None or not tape.records:
        raise ValueError("backward called with an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    produced = {id(r.out) for r in tape.records}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = inp
    out: dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        t = seen[key]
        if key in produced:
            continue
        g = g.astype(t.data.dtype, copy=False)
        t.grad = g if t.grad is None else t.grad + g
        out[t] = g
    return out


def value_and_grad(f: Callable[..., Tensor], params: Sequence[Tensor]):
    """Evaluate scalar ``f(*params)`` and its gradient w.r.t. ``params``."""
    with GradTape() as tape:
        loss = f(*params)
    grads = backward(loss, tape)
    return loss.item(), [grads.get(p, np.zeros_like(p.data)) for p in params]


def check_gradients(
    f: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    h: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Relative error between analytic and central-difference gradients.

    For each tensor the probed coordinates give ``|a - n| / max(|a|, |n|)``
    in the 2-norm; the worst tensor is returned. Measuring per tensor keeps
    coordinates whose true gradient is zero from dividing noise by noise.
    ``f`` is called with the point tensor(s) and must return a scalar Tensor.
    With ``max_coords`` only that many randomly chosen coordinates per tensor
    are probed.
    """
    if not 1e-5 <= h <= 1e-2:
        raise ValueError(f"step h={h} outside [1e-5, 1e-2]")
    points = [point] if isinstance(point, Tensor) else list(point)
    saved = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
        p.grad = None
    try:
        _, analytic = value_and_grad(f, points)
    finally:
        for p, r in zip(points, saved):
            p.requires_grad = r
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(points, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        ga = ga.reshape(-1)
        numeric = np.empty(len(coords))
        for n, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*points).item())
            flat[i] = orig - h
            fm = float(f(*points).item())
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"f is non-finite near coordinate {i}")
            numeric[n] = (fp - fm) / (2.0 * h)
        a = ga[coords].astype(np.float64)
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - numeric)) / scale)
    return worst


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> list[str]:
    """One in-place Adam step with bias correction.

    Tensors whose gradient is missing are left alone; tensors with a non-finite
    gradient are skipped and their names returned.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    state.step += 1
    k = state.step
    c1 = 1.0 - beta1**k
    c2 = 1.0 - beta2**k
    skipped = []
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            skipped.append(name)
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        upd = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= upd.astype(p.data.dtype, copy=False)
    return skipped


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = "surfgen-container v1"


def save_container(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None) -> None:
    """Text header (meta + tensor table) followed by raw little-endian payloads."""
    lines = [MAGIC]
    for k, v in (meta or {}).items():
        v = str(v)
        if "\n" in v or " " in k:
            raise ValueError(f"meta entry {k!r} must be single-line without spaces in key")
        lines.append(f"meta {k} {v}")
    arrays = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            dt = np.dtype(arr.dtype).newbyteorder("<")
        elif arr.dtype.kind in "iub":
            dt = np.dtype("<i8")
        else:
            raise TypeError(f"cannot store dtype {arr.dtype} for {name}")
        arr = np.asarray(arr, dtype=dt, order="C")
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"tensor {name} {dt.str} {shape}")
        arrays.append(arr)
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in arrays:
            fh.write(arr.tobytes(order="C"))


def load_container(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    header_end = blob.find(b"\nend\n")
    if not blob.startswith(MAGIC.encode()) or header_end < 0:
        raise ValueError(f"{path}: not a surfgen container")
    header = blob[:header_end].decode("utf-8").split("\n")[1:]
    offset = header_end + len(b"\nend\n")
    meta: dict[str, str] = {}
    tensors: dict[str, np.ndarray] = {}
    for line in header:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, _, v = rest.partition(" ")
            meta[k] = v
            continue
        name, dt, shape = rest.split(" ")
        shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        dt = np.dtype(dt)
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise ValueError(f"{path}: truncated payload for {name}")
        tensors[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape).copy()
        offset += nbytes
    return tensors, meta


def tensor_table(tensors: Mapping[str, np.ndarray]) -> list[tuple[str, tuple[int, ...], str]]:
    return [(k, tuple(v.shape), str(v.dtype)) for k, v in tensors.items()]
