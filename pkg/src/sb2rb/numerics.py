"""Dense float64 tensors with a reverse-mode tape, Adam, and gradient checking.

Tensors wrap read-only numpy arrays. Operations run eagerly; when a
:class:`Tape` is active and at least one input is tracked by it, the op is
appended to the tape together with its vector-Jacobian product.

Complex quantities are carried as a size-2 real axis (real, imaginary). The
networks in this package put that axis at position 1, i.e. ``(batch, 2, ...)``.
"""
from __future__ import annotations

import json
import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonDifferentiableError", "AdamState", "Adam",
    "backward", "adam_step", "grad_check", "GradCheckReport",
    "add", "sub", "mul", "div", "neg", "square", "sqrt", "exp", "relu", "sigmoid",
    "sum", "mean", "reshape", "transpose", "getitem", "take", "concat", "stack",
    "einsum", "dense", "conv1d", "conv2d", "cmul", "round_",
    "complex_einsum", "save_checkpoint", "load_checkpoint",
]


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, expected, actual):
        self.op = op
        self.expected = expected
        self.actual = actual
        super().__init__(f"{op}: expected {expected}, got {actual}")


class NonDifferentiableError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return getitem(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_ACTIVE: list["Tape"] = []


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class Tape:
    """Records primitive ops on watched tensors for one backward pass.

    Use as a context manager::

        with Tape() as tape:
            tape.watch(*params)
            loss = model(x)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._tracked: set[int] = set()
        self._keep: list[Tensor] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked.add(id(t))
            self._keep.append(t)

    def is_tracked(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    def _record(self, op, inputs, output, vjp):
        self.records.append(_Record(op, inputs, output, vjp))
        self._tracked.add(id(output))

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        grads = backward(self, loss)
        return [grads.get(id(p), np.zeros(p.shape)) for p in params]


def _emit(op: str, inputs: Sequence, out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_data)
    for tape in _ACTIVE:
        if any(isinstance(t, Tensor) and tape.is_tracked(t) for t in inputs):
            tape._record(op, tuple(_as_tensor(t) for t in inputs), out, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients keyed by ``id(tensor)``."""
    if loss.data.size != 1:
        raise ShapeError("backward", "scalar loss", loss.shape)
    if not tape.records:
        raise ValueError("backward: tape is empty")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        if rec.vjp is None:
            raise NonDifferentiableError(f"non-differentiable op '{rec.op}' on gradient path")
        for t, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not tape.is_tracked(t):
                continue
            gi = _unbroadcast(gi, t.shape)
            if id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "broadcast-compatible shapes", (a.shape, b.shape)) from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", (a, b), out, lambda g: (g / bd, -g * out / bd))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _emit("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


# grad_check watches the ReLU sign patterns so it can tell when a finite
# difference step straddles a kink
_kinks = threading.local()


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    log = getattr(_kinks, "log", None)
    if log is not None:
        log.append(pos)
    return _emit("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign to avoid overflow in exp
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def round_(a) -> Tensor:
    """Round half up. Has no gradient; a backward pass through it raises."""
    a = _as_tensor(a)
    return _emit("round", (a,), np.floor(a.data + 0.5), None)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = math.prod(a.shape[ax] for ax in axes)
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"size {a.data.size}", shape) from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", (a,), a.data[idx], vjp)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = _as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        sel = (slice(None),) * axis + (indices,)
        np.add.at(full, sel, g)
        return (full,)

    return _emit("take", (a,), np.take(a.data, indices, axis=axis), vjp)


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", "equal shapes off the concat axis", [t.shape for t in ts]) from None
    return _emit("concat", ts, out, lambda g: np.split(g, splits, axis=axis))


def stack(tensors: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in ts], axis=axis)


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------

def _parse_einsum(spec: str):
    ins, out = spec.replace(" ", "").split("->")
    a_sub, b_sub = ins.split(",")
    return a_sub, b_sub, out


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum. Every input index must appear in the output or the other operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    a_sub, b_sub, o_sub = _parse_einsum(spec)
    if len(a_sub) != a.ndim or len(b_sub) != b.ndim:
        raise ShapeError("einsum", f"{a_sub},{b_sub}", (a.shape, b.shape))
    ad, bd = a.data, b.data
    try:
        out = np.einsum(spec, ad, bd, optimize=True)
    except ValueError:
        raise ShapeError("einsum", spec, (a.shape, b.shape)) from None

    def vjp(g):
        ga = np.einsum(f"{o_sub},{b_sub}->{a_sub}", g, bd, optimize=True)
        gb = np.einsum(f"{o_sub},{a_sub}->{b_sub}", g, ad, optimize=True)
        return ga, gb

    return _emit("einsum", (a, b), out, vjp)


def dense(x, w, b) -> Tensor:
    """Affine map over the last axis: ``x @ w + b`` with ``w`` of shape (in, out)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("dense", f"x[..., {w.shape[0] if w.ndim == 2 else '?'}], b[{w.shape[-1]}]",
                         (x.shape, w.shape, b.shape))
    xd, wd = x.data, w.data
    out = xd @ wd + b.data

    def vjp(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _emit("dense", (x, w, b), out, vjp)


def conv2d(x, w, b) -> Tensor:
    """Zero-padded 'same' 2-D cross-correlation.

    x: (B, Cin, H, W); w: (Cout, Cin, KH, KW) with odd kernel sizes; b: (Cout,).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError("conv2d", "x[B,Cin,H,W], w[Cout,Cin,KH,KW], b[Cout]",
                         (x.shape, w.shape, b.shape))
    kh, kw = w.shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d", "odd kernel sizes", (kh, kw))
    ph, pw = kh // 2, kw // 2
    H, W = x.shape[2:]
    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,Cin,H,W,kh,kw
    out = np.einsum("bchwij,ocij->bohw", win, wd, optimize=True) + b.data[None, :, None, None]

    def vjp(g):
        gw = np.einsum("bchwij,bohw->ocij", win, g, optimize=True)
        gb = g.sum(axis=(0, 2, 3))
        gp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gp[:, :, i:i + H, j:j + W] += np.einsum("bohw,oc->bchw", g, wd[:, :, i, j], optimize=True)
        return gp[:, :, ph:ph + H, pw:pw + W], gw, gb

    return _emit("conv2d", (x, w, b), out, vjp)


def conv1d(x, w, b) -> Tensor:
    """Zero-padded 'same' 1-D cross-correlation along the last axis.

    x: (B, Cin, L); w: (Cout, Cin, K) with K odd; b: (Cout,).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError("conv1d", "x[B,Cin,L], w[Cout,Cin,K], b[Cout]", (x.shape, w.shape, b.shape))
    B, C, L = x.shape
    O, _, K = w.shape
    y = conv2d(reshape(x, (B, C, 1, L)), reshape(w, (O, C, 1, K)), b)
    return reshape(y, (B, O, L))


def cmul(a, b, axis: int = 1) -> Tensor:
    """Complex product of tensors holding (re, im) along a size-2 ``axis``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[axis] != 2 or b.shape[axis] != 2:
        raise ShapeError("cmul", f"size 2 on axis {axis}", (a.shape, b.shape))
    _broadcast_check("cmul", a, b)
    ar, ai = np.take(a.data, 0, axis), np.take(a.data, 1, axis)
    br, bi = np.take(b.data, 0, axis), np.take(b.data, 1, axis)
    out = np.stack([ar * br - ai * bi, ar * bi + ai * br], axis=axis)

    def vjp(g):
        gr, gi = np.take(g, 0, axis), np.take(g, 1, axis)
        # d/da of Re/Im parts: grad_a = g * conj(b), grad_b = g * conj(a)
        ga = np.stack([gr * br + gi * bi, -gr * bi + gi * br], axis=axis)
        gb = np.stack([gr * ar + gi * ai, -gr * ai + gi * ar], axis=axis)
        return ga, gb

    return _emit("cmul", (a, b), out, vjp)


def complex_einsum(spec: str, x: Tensor, A: np.ndarray) -> Tensor:
    """Apply a constant complex operand to a tensor whose axis 1 holds (re, im).

    ``spec`` is written for the complex view of ``x`` (axis 1 removed), e.g.
    ``"bdt,tf->bdf"``; the output again carries (re, im) on axis 1.
    """
    xr, xi = x[:, 0], x[:, 1]
    Ar, Ai = np.ascontiguousarray(A.real), np.ascontiguousarray(A.imag)
    re = einsum(spec, xr, Ar) - einsum(spec, xi, Ai)
    im = einsum(spec, xr, Ai) + einsum(spec, xi, Ar)
    return stack([re, im], axis=1)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> list[Tensor]:
    """One bias-corrected Adam update; returns new parameter tensors."""
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ShapeError("adam_step", f"{len(state.m)} params/grads", (len(params), len(grads)))
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        upd = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        out.append(Tensor(p.data - upd, name=p.name))
    return out


class Adam:
    """Stateful convenience wrapper around :func:`adam_step`."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params, grads):
        return adam_step(self.state, params, grads)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    per_param: list[float]
    message: str = ""
    refined: int = 0      # coordinates re-differenced with a smaller step to avoid a kink


def _eval_logged(fn, args) -> tuple[float, list[np.ndarray]]:
    _kinks.log = []
    try:
        return fn(*args).item(), _kinks.log
    finally:
        _kinks.log = None


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn: Callable[..., Tensor], params: Sequence[Tensor], tol: float = 1e-6,
               step: float = 1e-5, min_step: float = 1e-8) -> GradCheckReport:
    """Compare tape gradients of scalar ``fn(*params)`` with central differences.

    The error for each parameter is ``|g_tape - g_fd|_2 / max(|g_tape|_2, |g_fd|_2)``.
    A central difference whose ``+/- step`` evaluations flip the sign of any
    ReLU input is not a derivative estimate, so that coordinate is redone with
    the step divided by 10 (down to ``min_step``) until no kink is crossed.
    """
    params = list(params)
    with Tape() as tape:
        tape.watch(*params)
        loss = fn(*params)
    if any(r.vjp is None for r in tape.records):
        bad = sorted({r.op for r in tape.records if r.vjp is None})
        return GradCheckReport(False, math.inf, [], f"non-differentiable op in graph: {', '.join(bad)}")
    analytic = tape.gradient(loss, params)
    _, base_pattern = _eval_logged(fn, params)

    errs, refined, straddled = [], 0, 0
    for k, p in enumerate(params):
        base = p.data.reshape(-1)
        num = np.zeros(p.shape)
        flat = num.reshape(-1)
        for i in range(base.size):
            h = step
            while True:
                args = list(params)
                pert = base.copy()
                pert[i] += h
                args[k] = Tensor(pert.reshape(p.shape))
                fp, pat_p = _eval_logged(fn, args)
                pert[i] -= 2 * h
                args[k] = Tensor(pert.reshape(p.shape))
                fm, pat_m = _eval_logged(fn, args)
                smooth = _same_pattern(pat_p, base_pattern) and _same_pattern(pat_m, base_pattern)
                if smooth or h / 10 < min_step:
                    straddled += not smooth
                    break
                h /= 10
            refined += h != step
            flat[i] = (fp - fm) / (2 * h)
        denom = max(np.linalg.norm(analytic[k]), np.linalg.norm(num))
        errs.append(0.0 if denom == 0 else float(np.linalg.norm(analytic[k] - num) / denom))
    worst = max(errs) if errs else 0.0
    ok = worst <= tol
    msg = "ok" if ok else f"max relative error {worst:.3e} > {tol:.1e}"
    if straddled:
        msg += f"; {straddled} coordinate(s) still straddle a ReLU kink at step {min_step:.0e}"
    return GradCheckReport(ok, worst, errs, msg, refined)


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + weights.bin (little-endian float64)
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], hyper: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    layers = []
    with open(path / "weights.bin", "wb") as fh:
        for name, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
            layers.append({"name": name, "shape": list(t.shape)})
    manifest = {"format_version": CHECKPOINT_VERSION, "dtype": "float64-le",
                "layers": layers, "hyperparameters": hyper or {}}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest_file}")
    manifest = json.loads(manifest_file.read_text())
    blob = (path / "weights.bin").read_bytes()
    params, off = {}, 0
    for layer in manifest["layers"]:
        shape = tuple(layer["shape"])
        n = math.prod(shape)
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += n * struct.calcsize("<d")
        params[layer["name"]] = Tensor(arr, name=layer["name"])
    if off != len(blob):
        raise ValueError(f"checkpoint {path}: weights blob has {len(blob) - off} trailing bytes")
    return params, manifest.get("hyperparameters", {})
