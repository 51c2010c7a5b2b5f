"""Dense tensors with a reverse-mode gradient tape."""

import contextlib
import itertools

import numpy as np

from ..errors import ContractError

DTYPES = {"f32": np.float32, "f64": np.float64}

_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled():
    return _grad_enabled


class TapeEntry:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to input gradients. ``seq`` is the global record order."""

    __slots__ = ("seq", "parents", "backward")

    def __init__(self, parents, backward):
        self.seq = next(_counter)
        self.parents = parents
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "entry", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.entry = None
        self.name = name

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

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

    @property
    def is_leaf(self):
        return self.entry is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        backward(self)

    # arithmetic sugar; definitions live in functional
    def __add__(self, other):
        from .functional import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .functional import sub
        return sub(self, other)

    def __mul__(self, other):
        from .functional import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .functional import mul
        return mul(self, -1.0)

    def __matmul__(self, other):
        from .functional import matmul
        return matmul(self, other)

    def __getitem__(self, index):
        from .functional import getitem
        return getitem(self, index)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def record(data, parents, backward_fn):
    """Wrap ``data`` as an op output, recording it when any parent needs grad."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.entry = TapeEntry(parents, backward_fn)
    return out


class Tape:
    """The reachable slice of the global record, in record order."""

    def __init__(self, loss):
        seen = set()
        entries = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if t.entry is None or id(t) in seen:
                continue
            seen.add(id(t))
            entries.append(t)
            stack.extend(p for p in t.entry.parents if p.requires_grad)
        entries.sort(key=lambda t: t.entry.seq)
        self.outputs = entries

    def __len__(self):
        return len(self.outputs)

    def replay_reverse(self, seed_grad):
        """Push ``seed_grad`` from the last output back to the leaves."""
        if not self.outputs:
            return
        grads = {id(self.outputs[-1]): seed_grad}
        for t in reversed(self.outputs):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            parent_grads = t.entry.backward(g)
            for p, pg in zip(t.entry.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.entry is None:
                    _accumulate_leaf(p, pg)
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg


def _accumulate_leaf(leaf, g):
    if g.shape != leaf.data.shape:
        g = np.broadcast_to(g, leaf.data.shape)
    g = g.astype(leaf.data.dtype, copy=False)
    if leaf.grad is None:
        leaf.grad = np.array(g, copy=True)
    else:
        leaf.grad += g


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward() needs a scalar tensor, got shape {shape}")
    seed = np.ones_like(loss.data)
    if loss.entry is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, seed)
        return
    Tape(loss).replay_reverse(seed)
