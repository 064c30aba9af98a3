"""Minimal rank-4 tensor graph with reverse-mode gradients.

The operator set is exactly what the loop-filter blocks need: 3x3
same-padding convolution, dense layers on pooled features, ReLU, sigmoid,
global average pooling, per-channel scaling, elementwise add, channel
concatenation, an indexed residual merge, and the mean-absolute-error
loss.  Values are float32.  Convolution lowers to a BLAS float32 matmul
over unfolded patches; dense layers and reductions accumulate in float64.
Both stay within 1e-5 of a float64 reference at the sizes this network
uses, which the oracle tests pin down.

Gradients are recorded define-by-run: every operator returns a `Tensor`
holding a closure that scatters the output gradient back to its parents.
`Tensor.backward()` runs the closures in reverse topological order and
finally multiplies every `Parameter` gradient by its sparsity mask, so
weights that were pruned to zero receive zero gradient.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, GraphError, NumericError


class Rng:
    """Deterministic splittable random source.

    Wraps numpy's PCG64 generator behind a ``SeedSequence``.  ``split()``
    spawns an independent child stream; the same root seed reproduces the
    same tree of streams bit-for-bit across runs and platforms.
    """

    def __init__(self, seed=0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self) -> "Rng":
        """Spawn an independent child stream."""
        return Rng(self._seq.spawn(1)[0])

    def normal(self, scale: float, shape) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(np.float32)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(np.float32)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


class Tensor:
    """A float32 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._grad_fn = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor.

        Must be called on the result of a recorded forward computation;
        calling it on a leaf raises ``GraphError``.  Parameter gradients
        are multiplied by the sparsity mask before the method returns.
        """
        if self._grad_fn is None and not self._parents:
            raise GraphError("backward() requires a recorded forward computation")

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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))

        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._grad_fn is not None:
                node._grad_fn()
        for node in topo:
            if isinstance(node, Parameter):
                node.grad *= node.mask


class Parameter(Tensor):
    """Trainable tensor with Adam moments and a sparsity mask.

    Wherever ``mask`` is 0 the value is kept at exactly 0: gradients are
    masked in ``backward`` and values are re-masked after every optimizer
    step, so pruned weights can never be resurrected by training.
    """

    __slots__ = ("adam_m", "adam_v", "mask")

    def __init__(self, data):
        super().__init__(data, requires_grad=True)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.mask = np.ones_like(self.data)

    def take(self, axis: int, keep: np.ndarray) -> "Parameter":
        """Return a copy restricted to ``keep`` indices along ``axis``,
        carrying value, mask and Adam state."""
        out = Parameter(np.take(self.data, keep, axis=axis))
        out.mask = np.take(self.mask, keep, axis=axis).copy()
        out.adam_m = np.take(self.adam_m, keep, axis=axis).copy()
        out.adam_v = np.take(self.adam_v, keep, axis=axis).copy()
        return out

    def clone(self) -> "Parameter":
        out = Parameter(self.data.copy())
        out.mask = self.mask.copy()
        out.adam_m = self.adam_m.copy()
        out.adam_v = self.adam_v.copy()
        return out


def _result(data, parents) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def _require_rank4(t: Tensor, name: str) -> None:
    if t.data.ndim != 4:
        raise DimensionError(f"{name} must be rank-4 (n, c, h, w), got shape {t.data.shape}")


# -- convolution ---------------------------------------------------------

def _im2col3(x: np.ndarray) -> np.ndarray:
    """Unfold (n, c, h, w) into (n*h*w, 9*c) patches for a 3x3 kernel with
    zero padding 1 and stride 1; kernel position is the major column axis."""
    n, c, h, w = x.shape
    padded = np.zeros((n, h + 2, w + 2, c), dtype=np.float32)
    padded[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, 3, 3, c), dtype=np.float32)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, dy, dx, :] = padded[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(co, ci, 3, 3) -> (9*ci, co), matching the _im2col3 column layout."""
    co, ci = w.shape[0], w.shape[1]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(9 * ci, co))


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    co = w.shape[0]
    out = _im2col3(x) @ _kernel_matrix(w)
    out += b
    return np.ascontiguousarray(out.reshape(n, h, wd, co).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, weights: Parameter | Tensor, bias: Parameter | Tensor) -> Tensor:
    """3x3 convolution, zero padding 1, stride 1; spatial size is preserved.

    ``x`` is (n, ci, h, w), ``weights`` (co, ci, 3, 3), ``bias`` (co,).
    """
    _require_rank4(x, "conv2d input")
    if weights.data.ndim != 4 or weights.data.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d weights must be (co, ci, 3, 3), got {weights.data.shape}")
    if x.data.shape[1] != weights.data.shape[1]:
        raise DimensionError(
            f"conv2d channel mismatch: input has {x.data.shape[1]}, weights expect {weights.data.shape[1]}"
        )
    if bias.data.shape != (weights.data.shape[0],):
        raise DimensionError(f"conv2d bias must be ({weights.data.shape[0]},), got {bias.data.shape}")

    out = _result(_conv_forward(x.data, weights.data, bias.data), (x, weights, bias))
    if not out.requires_grad:
        return out

    def grad_fn():
        g = out.grad
        co = g.shape[1]
        ci = weights.data.shape[1]
        if weights.requires_grad:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, co)
            dw = _im2col3(x.data).T @ g2  # (9*ci, co)
            weights.grad += dw.reshape(3, 3, ci, co).transpose(3, 2, 0, 1)
        if bias.requires_grad:
            bias.grad += g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        if x.requires_grad:
            # dL/dx is the correlation of g with the spatially flipped,
            # channel-transposed kernel.
            wf = np.ascontiguousarray(weights.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            x.grad += _conv_forward(g, wf, np.zeros(wf.shape[0], np.float32))

    out._grad_fn = grad_fn
    return out


# -- dense ---------------------------------------------------------------

def dense(x: Tensor, weights: Parameter | Tensor, bias: Parameter | Tensor) -> Tensor:
    """Fully connected layer on pooled features: (n, ci, 1, 1) -> (n, co, 1, 1)."""
    _require_rank4(x, "dense input")
    if x.data.shape[2:] != (1, 1):
        raise DimensionError(f"dense input spatial extent must be 1x1, got {x.data.shape}")
    if weights.data.ndim != 2:
        raise DimensionError(f"dense weights must be a (co, ci) matrix, got {weights.data.shape}")
    co, ci = weights.data.shape
    if x.data.shape[1] != ci:
        raise DimensionError(f"dense channel mismatch: input has {x.data.shape[1]}, weights expect {ci}")
    if bias.data.shape != (co,):
        raise DimensionError(f"dense bias must be ({co},), got {bias.data.shape}")

    n = x.data.shape[0]
    x2 = x.data.reshape(n, ci).astype(np.float64)
    y = x2 @ weights.data.astype(np.float64).T + bias.data.astype(np.float64)
    out = _result(y.reshape(n, co, 1, 1).astype(np.float32), (x, weights, bias))
    if not out.requires_grad:
        return out

    def grad_fn():
        g2 = out.grad.reshape(n, co).astype(np.float64)
        if weights.requires_grad:
            weights.grad += (g2.T @ x2).astype(np.float32)
        if bias.requires_grad:
            bias.grad += g2.sum(axis=0).astype(np.float32)
        if x.requires_grad:
            x.grad += (g2 @ weights.data.astype(np.float64)).reshape(n, ci, 1, 1).astype(np.float32)

    out._grad_fn = grad_fn
    return out


# -- elementwise and shape ops -------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0.0), (x,))
    if out.requires_grad:
        def grad_fn():
            x.grad += out.grad * (x.data > 0)
        out._grad_fn = grad_fn
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    pos = d >= 0
    y = np.empty_like(d)
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    y[~pos] = e / (1.0 + e)
    out = _result(y, (x,))
    if out.requires_grad:
        def grad_fn():
            x.grad += out.grad * y * (1.0 - y)
        out._grad_fn = grad_fn
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (n, c, h, w) -> (n, c, 1, 1)."""
    _require_rank4(x, "global_avg_pool input")
    _, _, h, w = x.data.shape
    out = _result(x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(np.float32), (x,))
    if out.requires_grad:
        def grad_fn():
            x.grad += out.grad / (h * w)
        out._grad_fn = grad_fn
    return out


def channel_scale(features: Tensor, scale: Tensor) -> Tensor:
    """Multiply every spatial position of channel c by scale[n, c]."""
    _require_rank4(features, "channel_scale features")
    _require_rank4(scale, "channel_scale scale")
    if scale.data.shape != (features.data.shape[0], features.data.shape[1], 1, 1):
        raise DimensionError(
            f"channel_scale scale must be (n, c, 1, 1) matching features, got {scale.data.shape} "
            f"for features {features.data.shape}"
        )
    out = _result(features.data * scale.data, (features, scale))
    if out.requires_grad:
        def grad_fn():
            if features.requires_grad:
                features.grad += out.grad * scale.data
            if scale.requires_grad:
                scale.grad += (out.grad * features.data).sum(axis=(2, 3), keepdims=True)
        out._grad_fn = grad_fn
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def grad_fn():
            if a.requires_grad:
                a.grad += out.grad
            if b.requires_grad:
                b.grad += out.grad
        out._grad_fn = grad_fn
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_rank4(a, "concat_channels a")
    _require_rank4(b, "concat_channels b")
    sa, sb = a.data.shape, b.data.shape
    if (sa[0], sa[2], sa[3]) != (sb[0], sb[2], sb[3]):
        raise DimensionError(f"concat_channels requires matching (n, h, w): {sa} vs {sb}")
    ca = sa[1]
    out = _result(np.concatenate([a.data, b.data], axis=1), (a, b))
    if out.requires_grad:
        def grad_fn():
            if a.requires_grad:
                a.grad += out.grad[:, :ca]
            if b.requires_grad:
                b.grad += out.grad[:, ca:]
        out._grad_fn = grad_fn
    return out


def residual_merge(y: Tensor, x: Tensor, idx: np.ndarray) -> Tensor:
    """Add channel k of ``y`` onto channel ``idx[k]`` of ``x``; all other
    channels of ``x`` pass through.  Output width equals the width of ``x``.
    """
    _require_rank4(y, "residual_merge y")
    _require_rank4(x, "residual_merge x")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (y.data.shape[1],):
        raise DimensionError(f"residual_merge index must have one entry per y channel, got {idx.shape}")
    if len(np.unique(idx)) != idx.size:
        raise DimensionError("residual_merge index entries must be unique")
    if (y.data.shape[0], y.data.shape[2], y.data.shape[3]) != (x.data.shape[0], x.data.shape[2], x.data.shape[3]):
        raise DimensionError(f"residual_merge requires matching (n, h, w): {y.data.shape} vs {x.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[1]):
        raise DimensionError("residual_merge index out of range for x channels")

    merged = x.data.copy()
    merged[:, idx] += y.data
    out = _result(merged, (y, x))
    if out.requires_grad:
        def grad_fn():
            if y.requires_grad:
                y.grad += out.grad[:, idx]
            if x.requires_grad:
                x.grad += out.grad
        out._grad_fn = grad_fn
    return out


def mae_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements; subgradient 0 at ties."""
    if prediction.data.shape != target.data.shape:
        raise DimensionError(f"mae_loss shape mismatch: {prediction.data.shape} vs {target.data.shape}")
    diff = prediction.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size
    out = _result(np.float32(np.abs(diff).mean()), (prediction, target))
    if out.requires_grad:
        sgn = np.sign(diff).astype(np.float32)
        def grad_fn():
            g = float(out.grad)
            if prediction.requires_grad:
                prediction.grad += (g / n) * sgn
            if target.requires_grad:
                target.grad -= (g / n) * sgn
        out._grad_fn = grad_fn
    return out


# -- optimizer -----------------------------------------------------------

def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: int = 1) -> None:
    """One Adam update with bias correction at step number ``t`` (>= 1).

    All gradients are validated up front; a non-finite gradient raises
    ``NumericError`` before any state is touched.  After the update every
    parameter is re-multiplied by its sparsity mask.
    """
    if t < 1:
        raise ValueError(f"adam step counter must be >= 1, got {t}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise GraphError("adam_step requires populated gradients")
        if not np.isfinite(p.grad).all():
            raise NumericError("non-finite gradient; optimizer step aborted")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / bc1
        v_hat = p.adam_v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)
        p.data *= p.mask


class Adam:
    """Adam optimizer over a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps, self.t + 1)
        self.t += 1
