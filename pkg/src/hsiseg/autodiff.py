"""Reverse-mode automatic differentiation on numpy arrays.

Every operation records its parents and a backward rule on the result
tensor; ``backward`` walks the recorded graph once in reverse topological
order and accumulates gradients. Model math runs in float32; float64
inputs are honored so gradient checks can run in double precision.
"""

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (e.g. for evaluation)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A numeric array plus an optional backpointer into the autodiff graph."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_freed")

    def __init__(self, values, requires_grad: bool = False):
        values = np.asarray(values)
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float32)
        self.values = values
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._freed = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=like.values.dtype))
    return Tensor(x)


def _record(values: np.ndarray, parents: tuple, backward) -> Tensor:
    """Create a result tensor, recording the edge only when gradients flow."""
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, grad: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += grad


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every tensor the scalar ``loss`` depends on.

    The recorded graph is released afterwards unless ``retain_graph``;
    a second backward through released nodes raises.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    if loss._freed:
        raise RuntimeError("backward called twice without retain_graph")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    # Interior nodes start each pass fresh; only leaves accumulate across passes.
    for node in topo:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if not retain_graph:
            node._parents = ()
            node._backward = None
            node._freed = True


def detach(t: Tensor) -> Tensor:
    """Same values, no graph history: downstream gradients stop here."""
    return Tensor(t.values)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _record(a.values + b.values, (a, b), back)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _record(a.values - b.values, (a, b), back)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)

    def back(g):
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _record(a.values * b.values, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _record(a.values @ b.values, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for 2-d ``x`` (batch, features)."""
    if x.values.ndim != 2:
        raise ShapeError(f"linear expects a 2-d input, got {x.shape}")
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(
            f"linear shapes incompatible: x {x.shape}, weight {weight.shape}, "
            f"bias {bias.shape}"
        )

    def back(g):
        _accumulate(x, g @ weight.values.T)
        _accumulate(weight, x.values.T @ g)
        _accumulate(bias, g.sum(axis=0))

    return _record(x.values @ weight.values + bias.values, (x, weight, bias), back)


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def back(g):
        _accumulate(x, g * mask)

    return _record(np.where(mask, x.values, 0.0), (x,), back)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    mask = x.values > 0

    def back(g):
        _accumulate(x, g * np.where(mask, 1.0, slope).astype(x.dtype))

    return _record(np.where(mask, x.values, slope * x.values), (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    def back(g):
        _accumulate(x, g.reshape(x.shape))

    return _record(x.values.reshape(shape), (x,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _record(np.concatenate([t.values for t in tensors], axis=axis), tensors, back)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``x[..., start:stop, ...]`` along one axis."""
    index = [slice(None)] * x.values.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        gx = np.zeros_like(x.values)
        gx[index] = g
        _accumulate(x, gx)

    return _record(x.values[index].copy(), (x,), back)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows ``x[idx]``; duplicate indices scatter-add in backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return _record(x.values[idx], (x,), back)


def tensor_sum(x: Tensor) -> Tensor:
    def back(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype))

    return _record(np.asarray(x.values.sum()), (x,), back)


def tensor_mean(x: Tensor) -> Tensor:
    n = x.values.size

    def back(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape).astype(x.dtype))

    return _record(np.asarray(x.values.mean()), (x,), back)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Flatten all kernel windows: (B, C, H, W) -> (B, out_h*out_w, C*kh*kw)."""
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    b, c, oh, ow = windows.shape[:4]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * kh * kw), oh, ow


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution on (B, C, H, W) input with (C_out, C_in, kh, kw) kernel."""
    if x.values.ndim != 4 or weight.values.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}"
        )
    bsz, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {x.shape}")

    pad_spec = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    padded = np.pad(x.values, pad_spec) if padding else x.values
    pad_shape, pad_dtype = padded.shape, padded.dtype
    cols, oh, ow = _im2col(padded, kh, kw, stride)
    del padded
    w_mat = weight.values.reshape(cout, -1)
    out = cols @ w_mat.T  # (B, oh*ow, cout)
    out = out.transpose(0, 2, 1).reshape(bsz, cout, oh, ow) + bias.values[None, :, None, None]

    def back(g):
        g_mat = g.reshape(bsz, cout, oh * ow).transpose(0, 2, 1)  # (B, oh*ow, cout)
        gw = np.tensordot(g_mat, cols, axes=([0, 1], [0, 1]))
        _accumulate(weight, gw.reshape(weight.shape))
        _accumulate(bias, g.sum(axis=(0, 2, 3)))
        g_cols = (g_mat @ w_mat).reshape(bsz, oh, ow, cin, kh, kw)
        g_pad = np.zeros(pad_shape, pad_dtype)
        for i in range(kh):
            for j in range(kw):
                g_pad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                    g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        if padding:
            g_pad = g_pad[:, :, padding:-padding, padding:-padding]
        _accumulate(x, g_pad)

    return _record(out, (x, weight, bias), back)


def avg_pool_full(x: Tensor) -> Tensor:
    """Global average pool: (B, C, H, W) -> (B, C)."""
    if x.values.ndim != 4:
        raise ShapeError(f"avg_pool_full expects a 4-d input, got {x.shape}")
    _, _, h, w = x.shape

    def back(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype))

    return _record(x.values.mean(axis=(2, 3)), (x,), back)


# ---------------------------------------------------------------------------
# normalization, dropout, classification losses


@dataclass
class BatchNormState:
    """Running statistics buffer for one batch_norm site."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def create(cls, n_features: int) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(n_features, dtype=np.float32),
            running_var=np.ones(n_features, dtype=np.float32),
        )


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over the batch (and spatial dims for 4-d input).

    Train mode normalizes with batch statistics and updates the running
    buffers; eval mode normalizes with the running statistics.
    """
    if x.values.ndim == 2:
        axes, param_shape = (0,), (1, -1)
    elif x.values.ndim == 4:
        axes, param_shape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batch_norm expects 2-d or 4-d input, got {x.shape}")
    gamma_b = gamma.values.reshape(param_shape)
    beta_b = beta.values.reshape(param_shape)

    if train:
        mean = x.values.mean(axis=axes, keepdims=True)
        var = x.values.var(axis=axes, keepdims=True)
        n = x.values.size // x.values.shape[1]
        unbiased = var * (n / max(1, n - 1))
        state.running_mean += momentum * (mean.ravel() - state.running_mean)
        state.running_var += momentum * (unbiased.ravel() - state.running_var)
    else:
        mean = state.running_mean.reshape(param_shape)
        var = state.running_var.reshape(param_shape)

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.values - mean) * inv_std
    out = gamma_b * x_hat + beta_b

    def back(g):
        _accumulate(gamma, (g * x_hat).sum(axis=axes))
        _accumulate(beta, g.sum(axis=axes))
        g_hat = g * gamma_b
        if train:
            n = x.values.size // x.values.shape[1]
            gx = (
                g_hat
                - g_hat.mean(axis=axes, keepdims=True)
                - x_hat * (g_hat * x_hat).mean(axis=axes, keepdims=True)
            ) * inv_std
        else:
            gx = g_hat * inv_std
        _accumulate(x, gx.astype(x.dtype))

    return _record(out, (x, gamma, beta), back)


def dropout(x: Tensor, p: float, train: bool, seed: int) -> Tensor:
    """Inverted dropout: scales by 1/(1-p) at train time, identity at eval."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    mask = np.random.default_rng(seed).random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)

    def back(g):
        _accumulate(x, g * mask * scale)

    return _record(x.values * mask * scale, (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(x, (s * (g - dot)).astype(x.dtype))

    return _record(s, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_z

    def back(g):
        soft = np.exp(out)
        _accumulate(x, (g - soft * g.sum(axis=axis, keepdims=True)).astype(x.dtype))

    return _record(out, (x,), back)


def cross_entropy(logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Weighted-mean cross entropy: sum_i w_i * nll_i / sum_i w_i.

    ``labels`` are integer class ids, ``weights`` nonnegative per-sample
    factors (defaults to ones, i.e. plain mean cross-entropy).
    """
    if logits.values.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise ConfigError(f"labels outside [0, {c})")
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ConfigError("cross_entropy weights must be nonnegative")
    total = weights.sum()
    if total <= 0:
        raise ConfigError("cross_entropy weights sum to zero")

    shifted = logits.values - logits.values.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    nll = -log_probs[np.arange(n), labels]
    loss = np.asarray((weights * nll).sum() / total)

    def back(g):
        soft = np.exp(log_probs)
        grad = soft.copy()
        grad[np.arange(n), labels] -= 1.0
        grad *= (weights / total)[:, None]
        _accumulate(logits, (g * grad).astype(logits.dtype))

    return _record(loss, (logits,), back)


# ---------------------------------------------------------------------------
# segment operations (graph aggregation)


def _check_segments(segment_ids: np.ndarray, num_segments: int) -> np.ndarray:
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if segment_ids.size and (segment_ids.min() < 0 or segment_ids.max() >= num_segments):
        raise ShapeError(f"segment ids outside [0, {num_segments})")
    return segment_ids


def segment_sum(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets."""
    segment_ids = _check_segments(segment_ids, num_segments)
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, segment_ids, x.values)

    def back(g):
        _accumulate(x, g[segment_ids])

    return _record(out, (x,), back)


def scatter_mean_by_segment(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Mean of rows per segment; empty segments yield zero rows."""
    segment_ids = _check_segments(segment_ids, num_segments)
    counts = np.bincount(segment_ids, minlength=num_segments).astype(x.dtype)
    counts = np.maximum(counts, 1.0)
    shape = (num_segments,) + (1,) * (x.values.ndim - 1)
    out = np.zeros((num_segments,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, segment_ids, x.values)
    out /= counts.reshape(shape)

    def back(g):
        _accumulate(x, (g / counts.reshape(shape))[segment_ids])

    return _record(out, (x,), back)


def segment_softmax(scores: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of 1-d scores normalized independently within each segment."""
    if scores.values.ndim != 1:
        raise ShapeError(f"segment_softmax expects 1-d scores, got {scores.shape}")
    segment_ids = _check_segments(segment_ids, num_segments)
    seg_max = np.full(num_segments, -np.inf, dtype=scores.dtype)
    np.maximum.at(seg_max, segment_ids, scores.values)
    z = np.exp(scores.values - seg_max[segment_ids])
    denom = np.zeros(num_segments, dtype=scores.dtype)
    np.add.at(denom, segment_ids, z)
    alpha = z / denom[segment_ids]

    def back(g):
        seg_dot = np.zeros(num_segments, dtype=np.float64)
        np.add.at(seg_dot, segment_ids, alpha * g)
        _accumulate(scores, (alpha * (g - seg_dot[segment_ids])).astype(scores.dtype))

    return _record(alpha, (scores,), back)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def gradcheck(
    fn,
    arrays: list,
    step: float = 1e-3,
    rtol: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` maps Tensors to one output tensor; non-scalar outputs are reduced
    with a fixed random projection. All arithmetic runs in float64. Returns
    the worst relative error across inputs; raises AssertionError beyond
    ``rtol``.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    projection = None

    def scalar_value(values_list) -> float:
        nonlocal projection
        with no_grad():
            out = fn(*[Tensor(v) for v in values_list])
        if projection is None:
            projection = (
                np.ones_like(out.values)
                if out.values.size == 1
                else rng.standard_normal(out.values.shape)
            )
        return float((out.values * projection).sum())

    scalar_value(arrays)  # fixes the projection before differentiation
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    loss = tensor_sum(mul(out, Tensor(projection)))
    backward(loss)

    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = tensors[i].grad
        assert analytic is not None, f"no gradient reached input {i}"
        fd = np.zeros_like(base)
        flat = base.ravel()
        for j in range(flat.size):
            bumped = [a.copy() for a in arrays]
            bumped[i].ravel()[j] = flat[j] + step
            up = scalar_value(bumped)
            bumped[i].ravel()[j] = flat[j] - step
            down = scalar_value(bumped)
            fd.ravel()[j] = (up - down) / (2 * step)
        scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-8)
        err = float(np.abs(analytic - fd).max() / scale)
        worst = max(worst, err)
        assert err < rtol, f"gradient mismatch on input {i}: rel err {err:.2e} >= {rtol}"
    return worst


def directional_gradcheck(
    fn,
    arrays: list,
    n_directions: int = 4,
    step: float = 1e-3,
    rtol: float = 1e-3,
    rng: np.random.Generator | None = None,
) -> float:
    """Finite-difference check along random directions instead of per element.

    Suited to whole models, where per-element differencing would need one
    forward pass per parameter. For each input and each of ``n_directions``
    random unit vectors v, compares (f(x+hv) - f(x-hv)) / 2h against <grad, v>.
    Same float64 arithmetic and scalar projection as :func:`gradcheck`.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    projection = None

    def scalar_value(values_list) -> float:
        nonlocal projection
        with no_grad():
            out = fn(*[Tensor(v) for v in values_list])
        if projection is None:
            projection = (
                np.ones_like(out.values)
                if out.values.size == 1
                else rng.standard_normal(out.values.shape)
            )
        return float((out.values * projection).sum())

    scalar_value(arrays)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    loss = tensor_sum(mul(out, Tensor(projection)))
    backward(loss)

    worst = 0.0
    for i, base in enumerate(arrays):
        analytic = tensors[i].grad
        assert analytic is not None, f"no gradient reached input {i}"
        for _ in range(n_directions):
            v = rng.standard_normal(base.shape)
            v /= max(np.linalg.norm(v), 1e-12)
            bumped = [a.copy() for a in arrays]
            bumped[i] = base + step * v
            up = scalar_value(bumped)
            bumped[i] = base - step * v
            down = scalar_value(bumped)
            fd = (up - down) / (2 * step)
            directional = float((analytic * v).sum())
            scale = max(abs(directional), abs(fd), 1e-8)
            err = abs(directional - fd) / scale
            worst = max(worst, err)
            assert err < rtol, (
                f"directional gradient mismatch on input {i}: rel err {err:.2e} >= {rtol}"
            )
    return worst
