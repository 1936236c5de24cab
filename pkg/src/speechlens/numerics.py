"""Dense float64 tensors with reverse-mode gradient recording.

A Tensor wraps a numpy array. Operations executed inside a ``with
GradientTape():`` block are recorded so a later ``tape.backward(root)``
fills ``grad`` on every tensor that contributed to the scalar root.
Outside a tape the same functions just compute values, which is how the
post-hoc interpretation path consumes them.
"""

import struct
import threading

import numpy as np

__all__ = [
    "Tensor", "GradientTape",
    "ShapeError", "NumericError", "TapeError", "TensorFormatError",
    "tensor", "zeros",
    "matmul", "bmm", "add", "sub", "mul", "scale", "relu",
    "softmax_rows", "log_softmax", "layer_norm_rows",
    "take_row", "slice_rows", "concat_rows", "stack_rows",
    "embedding_lookup", "split_heads", "merge_heads", "swap_last2",
    "vecmat", "dropout", "clamp_nonneg",
    "pack_tensor", "unpack_tensor", "write_tensor", "read_tensor",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """Input values are outside an operation's numeric domain."""


class TapeError(RuntimeError):
    """Gradient tape misuse: bad root, double backward, nested tapes."""


class TensorFormatError(ValueError):
    """Serialized tensor payload is malformed or truncated."""


# ----- tensor -------------------------------------------------------------


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "tape_id")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape_id = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self) -> "Tensor":
        """Sum of all elements as a scalar tensor."""
        x = self
        out = Tensor(x.data.sum())

        def back(g):
            _accumulate(x, np.broadcast_to(g, x.data.shape))

        _record(out, back)
        return out

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def tensor(data) -> Tensor:
    return Tensor(data)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----- gradient tape ------------------------------------------------------

_TAPE_SLOT = threading.local()
_token_lock = threading.Lock()
_next_token = [1]


def _active_tape():
    return getattr(_TAPE_SLOT, "tape", None)


class GradientTape:
    """Records operations so gradients can be replayed in reverse.

    One tape covers one forward pass; ``backward`` may be called once.
    Tapes are per-thread and must not be nested.
    """

    def __init__(self):
        self._nodes = []
        self._spent = False
        with _token_lock:
            self._token = _next_token[0]
            _next_token[0] += 1

    def __enter__(self):
        if _active_tape() is not None:
            raise TapeError("a gradient tape is already active on this thread")
        _TAPE_SLOT.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_SLOT.tape = None
        return False

    def _record(self, out: Tensor, back) -> None:
        out.tape_id = self._token
        self._nodes.append((out, back))

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Tensor) -> None:
        """Propagate d(root)/d(x) into ``grad`` of every contributing tensor.

        Gradients add into existing buffers, so successive backward calls
        from separate tapes accumulate (used for gradient accumulation).
        """
        if self._spent:
            raise TapeError("backward was already called on this tape")
        if not isinstance(root, Tensor) or root.tape_id != self._token:
            raise TapeError("backward root is not a value recorded on this tape")
        if root.data.ndim != 0:
            raise TapeError(f"backward root must be a scalar, got shape {root.shape}")
        self._spent = True
        _accumulate(root, np.ones_like(root.data))
        for out, back in reversed(self._nodes):
            if out.grad is not None:
                back(out.grad)


def _record(out: Tensor, back) -> None:
    t = _active_tape()
    if t is not None:
        t._record(out, back)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----- arithmetic ops -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    _record(out, back)
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    _record(out, back)
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    _record(out, back)
    return out


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    if not np.isfinite(c):
        raise NumericError(f"scale factor must be finite, got {c}")
    out = Tensor(a.data * c)

    def back(g):
        _accumulate(a, g * c)

    _record(out, back)
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0))

    def back(g):
        _accumulate(a, g * mask)

    _record(out, back)
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k) @ (k,n), got {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    _record(out, back)
    return out


def bmm(a, b) -> Tensor:
    """Batched matmul: (h,m,k) @ (h,k,n) -> (h,m,n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if (a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise ShapeError(f"bmm needs (h,m,k) @ (h,k,n), got {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def back(g):
        _accumulate(a, g @ b.data.transpose(0, 2, 1))
        _accumulate(b, a.data.transpose(0, 2, 1) @ g)

    _record(out, back)
    return out


def vecmat(v, m) -> Tensor:
    """(k,) @ (k,n) -> (n,)."""
    v, m = _as_tensor(v), _as_tensor(m)
    if v.data.ndim != 1 or m.data.ndim != 2 or v.shape[0] != m.shape[0]:
        raise ShapeError(f"vecmat needs (k,) @ (k,n), got {v.shape} and {m.shape}")
    out = Tensor(v.data @ m.data)

    def back(g):
        _accumulate(v, m.data @ g)
        _accumulate(m, np.outer(v.data, g))

    _record(out, back)
    return out


# ----- nonlinearities -----------------------------------------------------


def softmax_rows(x) -> Tensor:
    """Softmax along the trailing axis (each row of a matrix, each query
    row of a stacked head tensor)."""
    x = _as_tensor(x)
    if x.data.ndim < 1:
        raise ShapeError("softmax_rows needs at least one axis")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax input contains non-finite values")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(x, y * (g - dot))

    _record(out, back)
    return out


def log_softmax(x) -> Tensor:
    """Log-softmax of a vector."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"log_softmax needs a vector, got shape {x.shape}")
    if not np.isfinite(x.data).all():
        raise NumericError("log_softmax input contains non-finite values")
    m = x.data.max()
    z = x.data - m
    lse = np.log(np.exp(z).sum()) + m
    out = Tensor(x.data - lse)

    def back(g):
        _accumulate(x, g - np.exp(out.data) * g.sum())

    _record(out, back)
    return out


def layer_norm_rows(x, gain, bias, eps: float = 1e-8) -> Tensor:
    """Normalize each row to zero mean / unit variance, then apply a
    learned per-column affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm_rows needs a matrix, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm_rows affine needs shape ({d},), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gain.data + bias.data)

    def back(g):
        _accumulate(gain, (g * xhat).sum(axis=0))
        _accumulate(bias, g.sum(axis=0))
        dxh = g * gain.data
        term = dxh - dxh.mean(axis=1, keepdims=True) \
            - xhat * (dxh * xhat).mean(axis=1, keepdims=True)
        _accumulate(x, inv * term)

    _record(out, back)
    return out


# ----- structural ops -----------------------------------------------------


def take_row(x, i: int) -> Tensor:
    """Row i of a matrix as a vector; element i of a vector as a scalar."""
    x = _as_tensor(x)
    if x.data.ndim < 1 or not -x.shape[0] <= i < x.shape[0]:
        raise ShapeError(f"take_row index {i} invalid for shape {x.shape}")
    out = Tensor(np.array(x.data[i]))

    def back(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[i] += g

    _record(out, back)
    return out


def slice_rows(x, n: int) -> Tensor:
    """First n rows of a matrix."""
    x = _as_tensor(x)
    if x.data.ndim < 1 or not 0 < n <= x.shape[0]:
        raise ShapeError(f"slice_rows count {n} invalid for shape {x.shape}")
    out = Tensor(x.data[:n].copy())

    def back(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:n] += g

    _record(out, back)
    return out


def concat_rows(parts) -> Tensor:
    """Stack matrices (or vectors promoted to rows) along axis 0."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    blocks = [p.data if p.data.ndim == 2 else p.data.reshape(1, -1) for p in parts]
    widths = {b.shape[1] for b in blocks}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows got mismatched widths {sorted(widths)}")
    out = Tensor(np.concatenate(blocks, axis=0))
    counts = [b.shape[0] for b in blocks]

    def back(g):
        at = 0
        for p, n in zip(parts, counts):
            piece = g[at:at + n]
            _accumulate(p, piece if p.data.ndim == 2 else piece.reshape(p.data.shape))
            at += n

    _record(out, back)
    return out


def stack_rows(vectors) -> Tensor:
    """Stack equal-length vectors into a matrix, one per row."""
    vectors = [_as_tensor(v) for v in vectors]
    if not vectors:
        raise ShapeError("stack_rows needs at least one vector")
    for v in vectors:
        if v.data.ndim != 1 or v.shape != vectors[0].shape:
            raise ShapeError("stack_rows needs equal-length vectors")
    out = Tensor(np.stack([v.data for v in vectors], axis=0))

    def back(g):
        for i, v in enumerate(vectors):
            _accumulate(v, g[i])

    _record(out, back)
    return out


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of an embedding table by integer id."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("embedding_lookup needs a non-empty 1-d id list")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ShapeError(
            f"id {int(idx.max())} outside embedding table of {table.shape[0]} rows")
    out = Tensor(table.data[idx])

    def back(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    _record(out, back)
    return out


def split_heads(x, n_heads: int) -> Tensor:
    """(n, d) -> (h, n, d/h): carve the feature axis into heads."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"split_heads needs a matrix, got shape {x.shape}")
    n, d = x.shape
    if d % n_heads != 0:
        raise ShapeError(f"feature size {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    out = Tensor(x.data.reshape(n, n_heads, dh).transpose(1, 0, 2).copy())

    def back(g):
        _accumulate(x, g.transpose(1, 0, 2).reshape(n, d))

    _record(out, back)
    return out


def merge_heads(x) -> Tensor:
    """(h, n, dh) -> (n, h*dh): inverse of split_heads."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"merge_heads needs a rank-3 tensor, got shape {x.shape}")
    h, n, dh = x.shape
    out = Tensor(x.data.transpose(1, 0, 2).reshape(n, h * dh).copy())

    def back(g):
        _accumulate(x, g.reshape(n, h, dh).transpose(1, 0, 2))

    _record(out, back)
    return out


def swap_last2(x) -> Tensor:
    """Transpose the trailing two axes of a rank-3 tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"swap_last2 needs a rank-3 tensor, got shape {x.shape}")
    out = Tensor(x.data.transpose(0, 2, 1).copy())

    def back(g):
        _accumulate(x, g.transpose(0, 2, 1))

    _record(out, back)
    return out


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise NumericError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask)

    def back(g):
        _accumulate(x, g * mask)

    _record(out, back)
    return out


def clamp_nonneg(x) -> Tensor:
    """Elementwise max(x, 0). Never recorded: it serves the post-hoc
    interpretation path, which consumes gradients as plain data."""
    x = _as_tensor(x)
    return Tensor(np.maximum(x.data, 0.0))


# ----- serialization ------------------------------------------------------

_MAX_RANK = 8


def pack_tensor(a) -> bytes:
    """Serialize to little-endian bytes: u32 rank, u32 dims, f64 data."""
    arr = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    head = struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def unpack_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Read one serialized tensor from buf; returns (array, next offset)."""

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise TensorFormatError(
                f"truncated tensor payload at byte {offset}: "
                f"needed {n} more bytes for {what}")
        piece = buf[offset:offset + n]
        offset += n
        return piece

    (rank,) = struct.unpack("<I", take(4, "rank"))
    if rank > _MAX_RANK:
        raise TensorFormatError(f"implausible tensor rank {rank} at byte {offset - 4}")
    dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
    count = 1
    for d in dims:
        count *= d
    raw = take(8 * count, f"{count} float64 values")
    arr = np.frombuffer(raw, dtype="<f8", count=count).reshape(dims)
    return arr.astype(np.float64, copy=True), offset


def write_tensor(fh, a) -> None:
    fh.write(pack_tensor(a))


def read_tensor(fh) -> np.ndarray:
    """Read one serialized tensor from a binary stream."""

    def take(n: int, what: str) -> bytes:
        piece = fh.read(n)
        if len(piece) != n:
            raise TensorFormatError(
                f"truncated tensor stream at byte {fh.tell()}: "
                f"needed {n} bytes for {what}")
        return piece

    (rank,) = struct.unpack("<I", take(4, "rank"))
    if rank > _MAX_RANK:
        raise TensorFormatError(f"implausible tensor rank {rank}")
    dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
    count = 1
    for d in dims:
        count *= d
    raw = take(8 * count, f"{count} float64 values")
    arr = np.frombuffer(raw, dtype="<f8", count=count).reshape(dims)
    return arr.astype(np.float64, copy=True)
