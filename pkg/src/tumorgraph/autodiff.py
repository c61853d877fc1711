"""Minimal reverse-mode differentiation over dense numpy arrays.

Every operation returns a :class:`Tensor` that remembers its inputs and a
closure that pushes the upstream gradient back to them.  Calling
:meth:`Tensor.backward` on the final value walks that recorded graph in
reverse topological order.

Values are 32-bit by default; wrap code in ``with precision(np.float64):``
to run gradient checks in double precision.
"""
from __future__ import annotations

import contextlib
import io
import json
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.fft as sfft

from .errors import FormatError, NumericError, ShapeError

_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        self.data = np.asarray(data, dtype=default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        """Back-propagate from this tensor.

        ``grad`` defaults to ones, which for a scalar loss is the usual seed.
        Intermediate gradients are released once consumed; leaf gradients
        (parameters) accumulate.
        """
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        order = _topological_order(self)
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        if seed.shape != self.data.shape:
            raise ShapeError(f"seed gradient shape {seed.shape} != {self.data.shape}")
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if node._parents:
                node.grad = None


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


class Parameter(Tensor):
    """A trainable tensor carrying its gradient buffer and AdamW moments."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    _check_finite(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    return out


# ---------------------------------------------------------------- primitives


def matmul(a, b, trans_b: bool = False) -> Tensor:
    """``a @ b`` (or ``a @ b.T`` with ``trans_b``) for 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    bm = b.data.T if trans_b else b.data
    if a.shape[1] != bm.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} (trans_b={trans_b}) do not align")
    out = _result(a.data @ bm, (a, b), "matmul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ bm.T)
        if b.requires_grad:
            gb = g.T @ a.data if trans_b else a.data.T @ g
            b._accumulate(gb)

    out._backward = backward
    return out


def add_bias(x, bias) -> Tensor:
    """Add a vector along the last axis."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"bias of shape {bias.shape} does not fit {x.shape}")
    out = _result(x.data + bias.data, (x, bias), "add_bias")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    out._backward = backward
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    out = _result(np.where(active, x.data, 0).astype(x.data.dtype), (x,), "relu")

    def backward(g):
        # subgradient 0 at the kink
        x._accumulate(g * active)

    out._backward = backward
    return out


def concat(tensors: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    ts = [as_tensor(t) for t in tensors]
    lead = {t.shape[:-1] for t in ts}
    if len(lead) != 1:
        raise ShapeError(f"concat needs matching leading shapes, got {sorted(lead)}")
    out = _result(np.concatenate([t.data for t in ts], axis=-1), ts, "concat")
    bounds = np.cumsum([0] + [t.shape[-1] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(g[..., lo:hi])

    out._backward = backward
    return out


def neighbor_max(x, indptr: np.ndarray, indices: np.ndarray) -> Tensor:
    """Row-wise max over neighbor lists given in CSR form.

    Row ``u`` of the result is the element-wise max of ``x[indices[indptr[u]:indptr[u+1]]]``.
    Empty neighbor lists produce a zero row.  On ties the gradient goes to the
    first listed neighbor.
    """
    x = as_tensor(x)
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError("neighbor_max expects a 2-D feature matrix")
    n_rows = len(indptr) - 1
    if n_rows < 0 or indptr[0] != 0 or indptr[-1] != len(indices) or np.any(np.diff(indptr) < 0):
        raise ShapeError("malformed neighbor index pointer")
    if len(indices) and (indices.min() < 0 or indices.max() >= x.shape[0]):
        raise ShapeError("neighbor index out of range")

    counts = np.diff(indptr)
    nonempty = np.flatnonzero(counts > 0)
    starts = indptr[:-1][nonempty]
    gathered = x.data[indices]
    result = np.zeros((n_rows, x.shape[1]), dtype=x.data.dtype)
    if len(nonempty):
        result[nonempty] = np.maximum.reduceat(gathered, starts, axis=0)
    out = _result(result, (x,), "neighbor_max")

    def backward(g):
        if not len(nonempty):
            x._accumulate(np.zeros_like(x.data))
            return
        row_of = np.repeat(np.arange(n_rows), counts)
        hit = gathered == result[row_of]
        pos = np.where(hit, np.arange(len(indices))[:, None], len(indices))
        first = np.minimum.reduceat(pos, starts, axis=0)  # (nonempty, F)
        n_feat = x.shape[1]
        flat = indices[first] * n_feat + np.arange(n_feat)[None, :]
        gx = np.bincount(flat.ravel(), weights=g[nonempty].ravel(), minlength=x.data.size)
        x._accumulate(gx.reshape(x.shape).astype(x.data.dtype))

    out._backward = backward
    return out


def _kernel_spectrum(w: np.ndarray, lengths: tuple) -> np.ndarray:
    """rfftn of a small kernel zero-padded to ``lengths``, one axis at a time so padding costs nothing."""
    s = sfft.rfft(w, n=lengths[2], axis=-1)
    s = sfft.fft(s, n=lengths[1], axis=-2)
    return sfft.fft(s, n=lengths[0], axis=-3)


def _kernel_from_spectrum(spec: np.ndarray, lengths: tuple, k: int) -> np.ndarray:
    """Inverse of :func:`_kernel_spectrum`, evaluated only on the leading ``k**3`` corner."""
    s = sfft.ifft(spec, axis=-3)[..., :k, :, :]
    s = sfft.ifft(s, axis=-2)[..., :k, :]
    return sfft.irfft(s, n=lengths[2], axis=-1)[..., :k]


def conv3d(x, weight, bias=None, padding: int = 0) -> Tensor:
    """3-D cross-correlation, stride 1, zero padding.

    x: (C_in, X, Y, Z); weight: (C_out, C_in, k, k, k); bias: (C_out,).
    Computed with FFTs over a length that holds the padded input, so the
    circular products never wrap into the valid region.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 5:
        raise ShapeError("conv3d expects x of rank 4 and weight of rank 5")
    c_out, c_in, k, k1, k2 = weight.shape
    if not (k == k1 == k2):
        raise ShapeError("conv3d supports cubic kernels only")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv3d input has {x.shape[0]} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv3d bias shape {bias.shape} != ({c_out},)")
    p = int(padding)
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))
    padded = xp.shape[1:]
    out_shape = tuple(s - k + 1 for s in padded)
    if min(out_shape) < 1:
        raise ShapeError("conv3d kernel larger than padded input")
    lengths = tuple(sfft.next_fast_len(n, real=True) for n in padded)
    axes = (1, 2, 3)
    crop = (slice(None),) + tuple(slice(0, o) for o in out_shape)

    xs = sfft.rfftn(xp, s=lengths, axes=axes)
    ws = _kernel_spectrum(weight.data, lengths)
    res = sfft.irfftn(np.einsum("oi...,i...->o...", ws.conj(), xs), s=lengths, axes=axes)[crop]
    if bias is not None:
        res = res + bias.data[:, None, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _result(np.ascontiguousarray(res, dtype=x.data.dtype), parents, "conv3d")

    def backward(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(1, 2, 3)))
        gs = sfft.rfftn(g, s=lengths, axes=axes)
        if weight.requires_grad:
            # gw[o, i, d] = sum_n g[o, n] xp[i, n + d]
            prod = np.einsum("i...,o...->oi...", xs, gs.conj())
            weight._accumulate(_kernel_from_spectrum(prod, lengths, k))
        if x.requires_grad:
            # gxp[i, m] = sum_o sum_d g[o, m - d] w[o, i, d]
            gxp = sfft.irfftn(np.einsum("oi...,o...->i...", ws, gs), s=lengths, axes=axes)
            sx, sy, sz = x.shape[1:]
            x._accumulate(gxp[:, p:p + sx, p:p + sy, p:p + sz])

    out._backward = backward
    return out


def softmax(x) -> Tensor:
    """Softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _result(y, (x,), "softmax")

    def backward(g):
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    out._backward = backward
    return out


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    out = _result(y, (x,), "log")

    def backward(g):
        x._accumulate(g / x.data)

    out._backward = backward
    return out


def to_rows(x) -> Tensor:
    """Reshape a channel-first grid (C, ...) to a (N, C) matrix."""
    x = as_tensor(x)
    c = x.shape[0]
    out = _result(x.data.reshape(c, -1).T, (x,), "to_rows")

    def backward(g):
        x._accumulate(np.ascontiguousarray(g.T).reshape(x.shape))

    out._backward = backward
    return out


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean of per-row negative log-likelihoods.

    Normalised by the sum of the applied weights, so uniform weights of any
    magnitude give the plain mean cross-entropy.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError("cross-entropy expects (N, C) logits")
    n, c = logits.shape
    t = np.asarray(targets, dtype=np.int64).ravel()
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for {n} rows")
    if n == 0:
        raise ShapeError("cross-entropy over zero rows")
    if t.min() < 0 or t.max() >= c:
        raise ValueError("target class out of range")
    w_cls = np.ones(c) if weights is None else np.asarray(weights, dtype=np.float64)
    if w_cls.shape != (c,):
        raise ShapeError(f"expected {c} class weights")
    w = w_cls[t].astype(logits.data.dtype)
    total = w.sum()
    logp = log_softmax_np(logits.data)
    nll = -logp[np.arange(n), t]
    loss = np.asarray((w * nll).sum() / total, dtype=logits.data.dtype)
    out = _result(loss, (logits,), "weighted_cross_entropy")

    def backward(g):
        probs = np.exp(logp)
        probs[np.arange(n), t] -= 1.0
        logits._accumulate(probs * (w / total)[:, None] * g)

    out._backward = backward
    return out


# ------------------------------------------------------------------ training


def glorot_uniform(shape: tuple, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def lr_at_epoch(lr0: float, decay: float, epoch: int) -> float:
    """Exponentially decayed learning rate ``lr0 * decay**epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return lr0 * decay ** epoch


def adamw_step(params: Iterable[Parameter], lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One AdamW update with decoupled weight decay, in place."""
    for p in params:
        if p.grad is None:
            raise ValueError("parameter has no gradient")
        p.step += 1
        p.data *= 1.0 - lr * weight_decay
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


# --------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"CKPT1"


def save_checkpoint(path, params: dict[str, Parameter], epoch: int = 0, metadata: dict | None = None) -> None:
    """Write parameters, AdamW state, the epoch counter and a JSON metadata blob.

    Layout (little-endian): magic, u32 epoch, u32 count, then per parameter
    u16 name length, name bytes, u8 rank, u32 extents, u64 step, and the
    value, first-moment and second-moment arrays as float32.  A trailing u32
    length plus UTF-8 JSON holds ``metadata``.
    """
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<II", epoch, len(params)))
    for name, p in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(struct.pack("<Q", p.step))
        for arr in (p.data, p.m, p.v):
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, Parameter], int, dict]:
    blob = Path(path).read_bytes()
    if blob[:5] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        pos = 5
        epoch, count = struct.unpack_from("<II", blob, pos)
        pos += 8
        params: dict[str, Parameter] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            (step,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            size = int(np.prod(shape))
            arrays = []
            for _ in range(3):
                arrays.append(np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape))
                pos += 4 * size
            p = Parameter(arrays[0].copy())
            p.m = arrays[1].astype(p.data.dtype)
            p.v = arrays[2].astype(p.data.dtype)
            p.step = step
            params[name] = p
        (mlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        metadata = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint") from exc
    return params, epoch, metadata
