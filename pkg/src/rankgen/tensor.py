"""Dense float64 tensors with tape-based reverse-mode differentiation.

A `Tape` records every differentiable operation executed while it is the
active tape on the current thread; `Tape.backward` replays the records in
reverse to accumulate gradients. Without an active tape all operations are
plain numpy forward computations, which is the fast path used by sampling
and rollouts. Tapes are thread-confined; independent tapes may run on
separate threads concurrently.

Broadcasting is deliberately restricted to scalar-with-tensor and
equal-shape operands so every gradient rule stays auditable; the one
batch convenience is `add_bias` (matrix + row vector) with an explicit
column-sum gradient.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class DomainError(ValueError):
    """Operand values outside an operation's numeric domain (e.g. log of <= 0)."""


class GraphError(RuntimeError):
    """Misuse of the tape, e.g. backward from a non-scalar or unrecorded loss."""


class Tensor:
    """A dense float64 array plus a differentiability flag.

    `requires_grad` marks leaves (parameters). Outputs of recorded
    operations get it set automatically while a tape is active.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        # order="C" keeps 0-d scalars 0-d (ascontiguousarray would promote).
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all routing through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape


_ACTIVE = threading.local()


def _tape_stack():
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape():
    """The innermost tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of operations; inputs always precede their consumers.

    Use as a context manager around the forward pass, then call
    `backward(loss)` (or the module-level `backward(tape, loss)`).
    """

    def __init__(self):
        # Each node: (output, inputs, backward_fn). backward_fn maps the
        # output gradient to a list of (input_tensor, gradient) pairs.
        self._nodes = []
        self._produced = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise GraphError("tape stack corrupted: exited a non-innermost tape")
        return False

    def _record(self, out: Tensor, inputs, bwd):
        out.requires_grad = True
        self._nodes.append((out, inputs, bwd))
        self._produced.add(id(out))

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor, wrt=None):
        """Gradients of a scalar `loss` recorded on this tape.

        Returns a dict mapping Tensor -> ndarray gradient. With `wrt`, the
        dict covers exactly those tensors, with zeros for any the loss does
        not depend on; otherwise it covers every requires_grad tensor that
        participated in a recorded operation.
        """
        if loss.data.shape != ():
            raise GraphError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced and not loss.requires_grad:
            raise GraphError("loss is not on this tape")

        grads = {id(loss): np.ones((), dtype=np.float64)}
        keep = {id(loss): loss}
        for out, inputs, bwd in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            for tensor, contrib in bwd(g):
                if not tensor.requires_grad:
                    continue
                key = id(tensor)
                buf = grads.get(key)
                if buf is None:
                    grads[key] = np.array(contrib, dtype=np.float64, copy=True)
                    keep[key] = tensor
                else:
                    buf += contrib

        if wrt is None:
            seen = set()
            result = {}
            for out, inputs, _ in self._nodes:
                for t in inputs:
                    if t.requires_grad and id(t) not in seen:
                        seen.add(id(t))
                        result[t] = grads.get(id(t), np.zeros(t.shape))
            if loss.requires_grad and id(loss) not in seen:
                result[loss] = grads[id(loss)]
            return result
        return {t: grads.get(id(t), np.zeros(t.shape)) for t in wrt}


def backward(tape: Tape, loss: Tensor, wrt=None):
    """Module-level alias for `tape.backward(loss, wrt)`."""
    return tape.backward(loss, wrt)


def _maybe_record(out: Tensor, inputs, bwd):
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(out, inputs, bwd)
    return out


# ---------------------------------------------------------------------------
# Elementwise and scalar-broadcast arithmetic


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    # Only equal-shape and scalar-with-tensor combinations are legal.
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(shape, grad):
    # Gradient of a scalar operand broadcast against a tensor.
    if shape == () and grad.shape != ():
        return grad.sum()
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return [(a, _reduce_to(a.shape, g)), (b, _reduce_to(b.shape, g))]

    return _maybe_record(out, (a, b), bwd) if _needs(a, b) else out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return [(a, _reduce_to(a.shape, g)), (b, _reduce_to(b.shape, -g))]

    return _maybe_record(out, (a, b), bwd) if _needs(a, b) else out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return [(a, _reduce_to(a.shape, g * b.data)), (b, _reduce_to(b.shape, g * a.data))]

    return _maybe_record(out, (a, b), bwd) if _needs(a, b) else out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "div")
    out = Tensor(a.data / b.data)

    def bwd(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return [(a, _reduce_to(a.shape, ga)), (b, _reduce_to(b.shape, gb))]

    return _maybe_record(out, (a, b), bwd) if _needs(a, b) else out


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)

    def bwd(g):
        return [(a, -g)]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


def _needs(*tensors) -> bool:
    return active_tape() is not None and any(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# Elementwise nonlinearities


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def bwd(g):
        return [(a, g * (1.0 - y * y))]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # Branch on sign to avoid exp overflow on large |x|.
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)

    def bwd(g):
        return [(a, g * y * (1.0 - y))]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y)

    def bwd(g):
        return [(a, g * y)]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value")
    out = Tensor(np.log(a.data))

    def bwd(g):
        return [(a, g / a.data)]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0

    def bwd(g):
        return [(a, g * mask)]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    y = np.sqrt(a.data)
    out = Tensor(y)

    def bwd(g):
        return [(a, g * 0.5 / y)]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


# ---------------------------------------------------------------------------
# Linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _maybe_record(out, (a, b), bwd) if _needs(a, b) else out


def add_bias(m: Tensor, b: Tensor) -> Tensor:
    """Matrix plus row vector, one row-broadcast with an explicit gradient."""
    m, b = as_tensor(m), as_tensor(b)
    if m.data.ndim != 2 or b.data.ndim != 1 or m.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias expects (R,C) + (C,), got {m.shape} and {b.shape}")
    out = Tensor(m.data + b.data)

    def bwd(g):
        return [(m, g), (b, g.sum(axis=0))]

    return _maybe_record(out, (m, b), bwd) if _needs(m, b) else out


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum())

    def bwd(g):
        return [(a, np.full(a.shape, float(g)))]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


def tmean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean())
    n = a.data.size

    def bwd(g):
        return [(a, np.full(a.shape, float(g) / n))]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two equal-shape tensors."""
    return tsum(mul(a, b))


# ---------------------------------------------------------------------------
# Softmax family (max-subtracted for stability)


def _check_axis(a: Tensor, axis: int):
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"axis {axis} invalid for shape {a.shape}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return [(a, y * (g - inner))]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_axis(a, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - logz
    out = Tensor(y)

    def bwd(g):
        return [(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


# ---------------------------------------------------------------------------
# Indexing and structural ops


def gather_rows(m: Tensor, indices) -> Tensor:
    """Select rows of a matrix; scatter-add gradient (duplicate-safe)."""
    m = as_tensor(m)
    idx = np.asarray(indices, dtype=np.int64)
    if m.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows expects (N,d) and 1-D indices, got {m.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
        raise ShapeError("gather_rows index out of range")
    out = Tensor(m.data[idx])

    def bwd(g):
        gm = np.zeros(m.shape)
        np.add.at(gm, idx, g)
        return [(m, gm)]

    return _maybe_record(out, (m,), bwd) if m.requires_grad else out


def take_along_rows(m: Tensor, indices) -> Tensor:
    """out[i] = m[i, indices[i]]; one element per row."""
    m = as_tensor(m)
    idx = np.asarray(indices, dtype=np.int64)
    if m.data.ndim != 2 or idx.shape != (m.shape[0],):
        raise ShapeError(f"take_along_rows expects (R,C) and (R,) indices, got {m.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[1]):
        raise ShapeError("take_along_rows index out of range")
    rows = np.arange(m.shape[0])
    out = Tensor(m.data[rows, idx])

    def bwd(g):
        gm = np.zeros(m.shape)
        gm[rows, idx] = g
        return [(m, gm)]

    return _maybe_record(out, (m,), bwd) if m.requires_grad else out


def pick(v: Tensor, index: int) -> Tensor:
    """Scalar element of a 1-D tensor."""
    v = as_tensor(v)
    if v.data.ndim != 1:
        raise ShapeError(f"pick expects a 1-D tensor, got {v.shape}")
    i = int(index)
    if not (0 <= i < v.shape[0]):
        raise ShapeError("pick index out of range")
    out = Tensor(v.data[i])

    def bwd(g):
        gv = np.zeros(v.shape)
        gv[i] = g
        return [(v, gv)]

    return _maybe_record(out, (v,), bwd) if v.requires_grad else out


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient zero-pads back."""
    a = as_tensor(a)
    _check_axis(a, axis)
    axis = axis % a.data.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis of size {a.shape[axis]}")
    sl = tuple(slice(start, start + length) if d == axis else slice(None)
               for d in range(a.data.ndim))
    out = Tensor(a.data[sl].copy())

    def bwd(g):
        ga = np.zeros(a.shape)
        ga[sl] = g
        return [(a, ga)]

    return _maybe_record(out, (a,), bwd) if a.requires_grad else out


def concat(parts) -> Tensor:
    """Concatenate 1-D tensors."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of no tensors")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat expects 1-D parts, got {p.shape}")
    out = Tensor(np.concatenate([p.data for p in parts]))
    sizes = [p.shape[0] for p in parts]

    def bwd(g):
        grads, off = [], 0
        for p, n in zip(parts, sizes):
            grads.append((p, g[off:off + n]))
            off += n
        return grads

    return _maybe_record(out, tuple(parts), bwd) if _needs(*parts) else out


def stack_scalars(parts) -> Tensor:
    """Stack scalar tensors into a vector."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("stack of no tensors")
    for p in parts:
        if p.data.shape != ():
            raise ShapeError(f"stack_scalars expects scalars, got {p.shape}")
    out = Tensor(np.array([p.data for p in parts]))

    def bwd(g):
        return [(p, np.asarray(g[i])) for i, p in enumerate(parts)]

    return _maybe_record(out, tuple(parts), bwd) if _needs(*parts) else out


# ---------------------------------------------------------------------------
# Text-convolution primitive

_NONLINEAR = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: (y > 0.0).astype(np.float64)),
    "identity": (lambda x: x, lambda y: np.ones_like(y)),
}


def conv1d_maxpool(seq: Tensor, banks, nonlinearity: str = "tanh") -> Tensor:
    """Valid 1-D convolution over time + nonlinearity + max-over-time pooling.

    `seq` is (T, d); each bank in `banks` is a (count, width, d) tensor of
    filters sharing one width. The output concatenates each bank's pooled
    responses, one value per filter. Pooling ties break toward the lowest
    time index, so gradients are deterministic.
    """
    seq = as_tensor(seq)
    if seq.data.ndim != 2:
        raise ShapeError(f"conv1d_maxpool expects (T,d) input, got {seq.shape}")
    banks = [as_tensor(b) for b in banks]
    if not banks:
        raise ShapeError("conv1d_maxpool with no filter banks")
    if nonlinearity not in _NONLINEAR:
        raise ShapeError(f"unknown nonlinearity {nonlinearity!r}")
    fn, dfn = _NONLINEAR[nonlinearity]

    t_len, dim = seq.shape
    pooled_parts = []
    saved = []  # per bank: (width, count, flat filters view args, argmax, activated)
    for bank in banks:
        if bank.data.ndim != 3 or bank.shape[2] != dim:
            raise ShapeError(f"filter bank shape {bank.shape} incompatible with input {seq.shape}")
        count, width, _ = bank.shape
        if width > t_len:
            raise ShapeError(f"sequence length {t_len} shorter than filter width {width}")
        windows = np.lib.stride_tricks.sliding_window_view(seq.data, (width, dim))
        windows = windows.reshape(t_len - width + 1, width * dim)
        flat = bank.data.reshape(count, width * dim)
        responses = fn(windows @ flat.T)        # (T-w+1, count)
        arg = responses.argmax(axis=0)          # first maximal index per filter
        pooled_parts.append(responses[arg, np.arange(count)])
        saved.append((bank, width, count, windows, responses, arg))

    out = Tensor(np.concatenate(pooled_parts))

    def bwd(g):
        gseq = np.zeros(seq.shape)
        grads = []
        off = 0
        for bank, width, count, windows, responses, arg in saved:
            gp = g[off:off + count]
            off += count
            act = responses[arg, np.arange(count)]
            local = gp * dfn(act)               # route only to the argmax window
            flat = bank.data.reshape(count, width * dim)
            gbank = np.zeros((count, width * dim))
            for j in range(count):
                win = windows[arg[j]]
                gbank[j] = local[j] * win
                row = arg[j]
                gseq[row:row + width] += (local[j] * flat[j]).reshape(width, dim)
            grads.append((bank, gbank.reshape(bank.shape)))
        grads.append((seq, gseq))
        return grads

    return _maybe_record(out, tuple([seq] + banks), bwd) if _needs(seq, *banks) else out


# ---------------------------------------------------------------------------
# Parameter update helpers


def global_norm(grads) -> float:
    """sqrt of the summed squared entries across a gradient collection."""
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g)))
    return float(np.sqrt(total))


def clip_by_global_norm(grads: dict, clip: float) -> dict:
    """Rescale a {tensor: grad} map so its global norm is at most `clip`."""
    norm = global_norm(grads.values())
    if clip > 0 and norm > clip:
        scale = clip / norm
        return {t: g * scale for t, g in grads.items()}
    return grads


def sgd_step(grads: dict, lr: float):
    """In-place descent step p -= lr * g for a {tensor: grad} map."""
    for t, g in grads.items():
        t.data -= lr * g
