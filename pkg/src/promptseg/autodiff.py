"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every value flowing through the model is a `Tensor` wrapping a row-major
float64 numpy array.  Operations executed while a `Tape` is active append a
record (output, inputs, local-gradient closure); `backward` walks the records
in reverse to accumulate dLoss/dLeaf into each leaf's `.grad` buffer.

Non-finite values are a contract violation: constructing a Tensor holding a
NaN or Inf raises `NumericError` immediately instead of letting it propagate.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_TAPES: list["Tape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A dense float64 array with an optional same-shape gradient buffer.

    The gradient buffer materializes on first access (backward touches only
    leaves, so pure inference never allocates one).
    """

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and min(arr.shape) <= 0:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = requires_grad
        self._grad = None

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; python scalars stay constants (no gradient).
    def __add__(self, other):
        return add_const(self, other) if _is_number(other) else add(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return add_const(self, -other) if _is_number(other) else sub(self, other)

    def __mul__(self, other):
        return mul_const(self, other) if _is_number(other) else mul(self, other)

    def __rmul__(self, other):
        return mul_const(self, other)

    def __truediv__(self, other):
        return mul_const(self, 1.0 / other) if _is_number(other) else div(self, other)

    def __neg__(self):
        return mul_const(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_number(x):
    return isinstance(x, (int, float, np.integer, np.floating))


class Tape:
    """Ordered record of primitive operations from one forward pass.

    Records are appended in construction order, which is a topological order:
    every record's inputs were produced by an earlier record or are leaves.
    A tape is single-threaded; run concurrent passes on separate tapes.
    """

    def __init__(self):
        self._records = []
        self._produced = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def record(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def __len__(self):
        return len(self._records)


def backward(tape, loss):
    """Accumulate dLoss/dLeaf into every requires_grad leaf of the tape.

    Repeated calls keep accumulating; call `zero_grad` on the leaves first if
    a fresh gradient is wanted.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward expects a scalar loss tensor")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gt in backward_fn(g):
            if not t.requires_grad:
                continue
            if id(t) not in tape._produced:
                leaves[id(t)] = t
            stored = grads.get(id(t))
            # Never mutate stored buffers in place: they may alias op outputs.
            grads[id(t)] = gt if stored is None else stored + gt
    if id(loss) not in tape._produced and loss.requires_grad:
        leaves[id(loss)] = loss
        grads.setdefault(id(loss), np.ones_like(loss.data))
    for tid, t in leaves.items():
        g = grads.get(tid)
        if g is not None:
            t.grad += g.reshape(t.data.shape)


def _unary(a, out_data, grad_fn):
    out = Tensor(out_data, requires_grad=a.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, (a,), lambda g: ((a, grad_fn(g)),))
    return out


# ---------------------------------------------------------------------------
# binary elementwise ops with the handful of broadcast patterns the model uses
# ---------------------------------------------------------------------------

def _bcast_case(a, b):
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1:
        return "bscalar"
    if a.data.size == 1:
        return "ascalar"
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return "brow"
    raise DimensionError(f"unsupported operand shapes {a.shape} and {b.shape}")


def _reduce_to(g, case, shape):
    if case == "same":
        return g
    if case in ("bscalar", "ascalar"):
        return np.array(g.sum()).reshape(shape)
    return g.sum(axis=0)  # brow


def _binop(a, b, fwd, ga_fn, gb_fn):
    case = _bcast_case(a, b)
    bd = b.data if case != "bscalar" else b.data.reshape(())
    ad = a.data if case != "ascalar" else a.data.reshape(())
    out = Tensor(fwd(ad, bd), requires_grad=a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd(g):
            pairs = []
            if a.requires_grad:
                ca = "same" if case in ("same", "brow", "bscalar") else "ascalar"
                pairs.append((a, _reduce_to(ga_fn(g, ad, bd), ca, a.shape)))
            if b.requires_grad:
                cb = "same" if case in ("same", "ascalar") else case
                pairs.append((b, _reduce_to(gb_fn(g, ad, bd), cb, b.shape)))
            return pairs
        tape.record(out, (a, b), bwd)
    return out


def add(a, b):
    return _binop(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binop(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binop(a, b, lambda x, y: x * y,
                  lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binop(a, b, lambda x, y: x / y,
                  lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def add_const(a, c):
    c = np.asarray(c, dtype=np.float64)
    return _unary(a, a.data + c, lambda g: g)


def mul_const(a, c):
    c = np.asarray(c, dtype=np.float64)
    return _unary(a, a.data * c, lambda g: g * c)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd, requires_grad=a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, g @ bd.T))
            if b.requires_grad:
                pairs.append((b, ad.T @ g))
            return pairs
        tape.record(out, (a, b), bwd)
    return out


def matmul_exact(a, b):
    """Matmul with a fixed naive summation order per output element.

    BLAS micro-kernels round differently depending on a row's position inside
    a panel, so `matmul` outputs are not bit-stable under row permutations.
    This variant (einsum without optimization) is, which keeps the decoder
    exactly equivariant to query permutations.  Gradients use plain matmul.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul_exact shapes {a.shape} x {b.shape}")
    ad_, bd = a.data, b.data
    out = Tensor(np.einsum("ik,kj->ij", ad_, bd, optimize=False),
                 requires_grad=a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, g @ bd.T))
            if b.requires_grad:
                pairs.append((b, ad_.T @ g))
            return pairs
        tape.record(out, (a, b), bwd)
    return out


def sortsum_matmul(a, b):
    """Matmul whose k-summation is value-sorted per output element.

    Used for self-attention aggregation so that permuting the query rows
    permutes the outputs bit-exactly (the reduction order no longer depends
    on row indices).  Gradients are the ordinary matmul gradients.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"sortsum_matmul shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    terms = ad[:, :, None] * bd[None, :, :]
    terms.sort(axis=1)
    out = Tensor(terms.sum(axis=1), requires_grad=a.requires_grad or b.requires_grad)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        def bwd(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, g @ bd.T))
            if b.requires_grad:
                pairs.append((b, ad.T @ g))
            return pairs
        tape.record(out, (a, b), bwd)
    return out


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _unary(a, a.data.T, lambda g: g.T)


def reshape(a, shape):
    return _unary(a, a.data.reshape(shape), lambda g: g.reshape(a.data.shape))


def concat_rows(tensors):
    if not tensors:
        raise DimensionError("concat_rows of nothing")
    cols = tensors[0].shape[-1]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[1] != cols:
            raise DimensionError("concat_rows needs 2-D tensors with equal column counts")
    out = Tensor(np.vstack([t.data for t in tensors]),
                 requires_grad=any(t.requires_grad for t in tensors))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        offsets = np.cumsum([0] + [t.shape[0] for t in tensors])
        def bwd(g):
            return [(t, g[offsets[i]:offsets[i + 1]])
                    for i, t in enumerate(tensors) if t.requires_grad]
        tape.record(out, tuple(tensors), bwd)
    return out


def take_rows(a, idx):
    """Gather rows by a constant integer index array (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D tensor, got {a.shape}")
    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return ga
    return _unary(a, a.data[idx], grad_fn)


def slice_rows(a, start, stop):
    idx = np.arange(start, stop, dtype=np.intp)
    return take_rows(a, idx)


def take_elems(a, rows, cols):
    """Pick a[rows[i], cols[i]] into a 1-D tensor."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return ga
    return _unary(a, a.data[rows, cols], grad_fn)


# ---------------------------------------------------------------------------
# nonlinearities and reductions
# ---------------------------------------------------------------------------

def relu(a):
    mask = a.data > 0.0
    return _unary(a, a.data * mask, lambda g: g * mask)


def exp(a):
    out_data = np.exp(a.data)
    return _unary(a, out_data, lambda g: g * out_data)


def log(a):
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    y = _sigmoid(np.atleast_1d(a.data)).reshape(a.data.shape)
    return _unary(a, y, lambda g: g * y * (1.0 - y))


def pow_const(a, p):
    p = float(p)
    out_data = a.data ** p
    return _unary(a, out_data, lambda g: g * p * a.data ** (p - 1.0))


def sum_all(a):
    return _unary(a, np.array(a.data.sum()),
                  lambda g: np.broadcast_to(g, a.data.shape))


def mean_all(a):
    n = a.data.size
    return _unary(a, np.array(a.data.mean()),
                  lambda g: np.broadcast_to(g / n, a.data.shape))


def sum_axis(a, axis, keepdims=False):
    if a.data.ndim != 2 or axis not in (0, 1):
        raise DimensionError(f"sum_axis supports 2-D tensors, got {a.shape}")
    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape)
    return _unary(a, a.data.sum(axis=axis, keepdims=keepdims), grad_fn)


def softmax_rows(x):
    """Row-wise softmax with the row max subtracted before exponentiation."""
    if x.data.ndim != 2:
        raise DimensionError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    def grad_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (g - dot) * y
    return _unary(x, y, grad_fn)


def sorted_softmax_rows(x):
    """Row softmax whose denominator sums value-sorted exponentials.

    Bit-exact under simultaneous row/column permutations (self-attention over
    queries), unlike the plain row sum whose reduction order follows the
    column index.
    """
    if x.data.ndim != 2:
        raise DimensionError(f"sorted_softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = np.sort(e, axis=1).sum(axis=1, keepdims=True)
    y = e / denom
    def grad_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (g - dot) * y
    return _unary(x, y, grad_fn)


def normalize_rows(x):
    """Scale each row to unit L2 norm; zero rows are a numeric error."""
    if x.data.ndim != 2:
        raise DimensionError(f"normalize_rows needs a 2-D tensor, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if (norms < 1e-150).any():
        raise NumericError("normalize_rows on a zero-norm row")
    y = x.data / norms
    def grad_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (g - y * dot) / norms
    return _unary(x, y, grad_fn)


def bce_with_logits_mean(logits, targets):
    """Mean binary cross-entropy on logits, overflow-safe log-sum-exp form."""
    t = np.asarray(targets, dtype=np.float64)
    x = logits.data
    if x.shape != t.shape:
        raise DimensionError(f"bce shapes disagree: {x.shape} vs {t.shape}")
    val = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    def grad_fn(g):
        return (g.reshape(()) / n) * (_sigmoid(np.atleast_1d(x)).reshape(x.shape) - t)
    return _unary(logits, np.array(val.mean()), grad_fn)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_diff_check(f, x, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a Tensor to a scalar Tensor and must be deterministic.  Relative
    error per coordinate is |analytic - central| / (|analytic| + |central|
    + 1e-12); the max over coordinates is returned.
    """
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
    backward(tape, y)
    analytic = x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.ravel()
    nflat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(x.data)).item()
        flat[i] = orig - h
        fm = f(Tensor(x.data)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(rel.max())
