"""Neural-network layers and losses on top of the autodiff tape.

Functional ops (conv2d, batchnorm2d, pooling, resizing, softshrink, the
2-D Walsh transform, and the logit-space losses) plus thin Module wrappers
that own parameters, buffers, and train/eval mode.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    DiffTensor,
    _unbroadcast,
    accumulate,
    as_tensor,
    make_node,
    softplus,
)
from .wht import fwht2_batch, sequency_reorder


# -- module containers -------------------------------------------------


class Module:
    """Parameter container with named traversal and train/eval mode.

    Assigning a DiffTensor attribute registers a parameter; assigning a
    Module registers a child.  named_arrays() is the checkpoint payload:
    parameters first, then buffers, in traversal order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, DiffTensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> None:
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", bool(mode))
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def named_arrays(self) -> dict:
        out = {}
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_arrays(self, arrays: dict) -> None:
        """Copy a checkpoint payload into parameters and buffers, strictly."""
        expected = self.named_arrays()
        missing = sorted(k for k in expected if k not in arrays)
        extra = sorted(k for k in arrays if k not in expected)
        if missing or extra:
            raise ValueError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
        for name, target in expected.items():
            src = np.asarray(arrays[name])
            if tuple(src.shape) != tuple(target.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: file {tuple(src.shape)} vs model {tuple(target.shape)}"
                )
            target[...] = src


class ModuleList(Module):
    """Sequence of child modules registered under their integer index."""

    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_order", [])
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._order)), module)
        self._order.append(module)

    def __iter__(self):
        return iter(self._order)

    def __len__(self):
        return len(self._order)

    def __getitem__(self, i):
        return self._order[i]


# -- convolution -------------------------------------------------------


def _pad2d(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n = xp.shape[0]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, -1)


def _col2im(gcols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = shape
    g6 = gcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros(shape, dtype=gcols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[
                :, :, :, :, i, j
            ]
    return out


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> DiffTensor:
    """2-D convolution (cross-correlation), NCHW in, OCkk weights.

    Forward runs one matmul over im2col patches; backward recomputes the
    patch matrix instead of caching it, trading a little compute for memory.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be 4-d NCHW, got {x.data.ndim}-d")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d weight must be 4-d OCkk, got {w.data.ndim}-d")
    n, c, h, wid = x.data.shape
    f, cw, kh, kw = w.data.shape
    if kh != kw:
        raise ValueError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kh}")
    if cw != c:
        raise ValueError(f"input channel dimension {c} does not match weight channel dimension {cw}")
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (f,):
            raise ValueError(
                f"bias dimension {b.data.shape} does not match output channel dimension {f}"
            )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h}x{wid}")

    wmat = w.data.reshape(f, -1)
    cols = _im2col(_pad2d(x.data, padding), kh, stride, ho, wo)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    if b is not None:
        out += b.data.reshape(1, f, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, f)
        cols_b = _im2col(_pad2d(x.data, padding), kh, stride, ho, wo)
        accumulate(w, (g2.T @ cols_b).reshape(f, c, kh, kh))
        gcols = g2 @ wmat
        gxp = _col2im(gcols, (n, c, h + 2 * padding, wid + 2 * padding), kh, stride, ho, wo)
        if padding:
            gxp = gxp[:, :, padding : padding + h, padding : padding + wid]
        accumulate(x, gxp)
        if b is not None:
            accumulate(b, g.sum(axis=(0, 2, 3)))

    return make_node(out, parents, bw)


# -- normalization -----------------------------------------------------


def batchnorm2d(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> DiffTensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics (biased variance) and folds
    an unbiased estimate into the running buffers in place; eval mode uses
    the running buffers directly.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 4:
        raise ValueError(f"batchnorm2d input must be 4-d NCHW, got {x.data.ndim}-d")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"affine parameters must have shape ({c},)")
    if training:
        if n < 2:
            raise ValueError("train-mode batch normalization requires batch size >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = n * h * w
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / (m - 1.0))
    else:
        mean = running_mean
        var = running_var
    inv = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1).astype(x.data.dtype)
    xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        accumulate(beta, g.sum(axis=(0, 2, 3)))
        gxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            mean_g = gxhat.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            accumulate(x, (gxhat - mean_g - xhat * mean_gx) * inv)
        else:
            accumulate(x, gxhat * inv)

    return make_node(out, (x, gamma, beta), bw)


# -- linear and pooling ------------------------------------------------


def linear(x, w, b=None) -> DiffTensor:
    """Affine map x @ w.T + b for 2-d batches."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(
            f"linear expects 2-d input and weight, got {x.data.ndim}-d and {w.data.ndim}-d"
        )
    f, din = w.data.shape
    if x.data.shape[1] != din:
        raise ValueError(f"input feature dimension {x.data.shape[1]} does not match weight {din}")
    out = x.data @ w.data.T
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (f,):
            raise ValueError(f"bias dimension {b.data.shape} does not match output features {f}")
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        accumulate(x, g @ w.data)
        accumulate(w, g.T @ x.data)
        if b is not None:
            accumulate(b, g.sum(axis=0))

    return make_node(out, parents, bw)


def global_avg_pool(x) -> DiffTensor:
    """Spatial mean per channel: NCHW -> NC."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool input must be 4-d NCHW, got {x.data.ndim}-d")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape))

    return make_node(out, (x,), bw)


def avg_pool2x2(x) -> DiffTensor:
    """Non-overlapping 2x2 mean pooling; spatial dims must be even."""
    x = as_tensor(x)
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x2 needs even spatial dims, got {h}x{w}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        accumulate(x, (g / 4.0).repeat(2, axis=2).repeat(2, axis=3))

    return make_node(out, (x,), bw)


def nearest_upsample2x(x) -> DiffTensor:
    """Replicate each pixel into a 2x2 block; gradient sums the block."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"nearest_upsample2x input must be 4-d NCHW, got {x.data.ndim}-d")
    n, c, h, w = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        accumulate(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return make_node(out, (x,), bw)


def nearest_resize(x, out_h: int, out_w: int) -> DiffTensor:
    """Nearest-neighbor resize with pixel-center sampling; NCHW in and out."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"nearest_resize input must be 4-d NCHW, got {x.data.ndim}-d")
    n, c, h, w = x.data.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    out = np.ascontiguousarray(x.data[:, :, rows][:, :, :, cols])

    def bw(g):
        z = np.zeros_like(x.data)
        for i, r in enumerate(rows):
            zi = z[:, :, r]
            gi = g[:, :, i]
            for j, cc in enumerate(cols):
                zi[:, :, cc] += gi[:, :, j]
        accumulate(x, z)

    return make_node(out, (x,), bw)


# -- shrinkage and transform -------------------------------------------


def softshrink(x, thresholds) -> DiffTensor:
    """y = sign(x) * max(|x| - T, 0) with subgradient 0 at |x| == T."""
    x, t = as_tensor(x), as_tensor(thresholds)
    if np.any(t.data < 0):
        raise ValueError("softshrink thresholds must be nonnegative")
    mag = np.abs(x.data) - t.data
    mask = mag > 0
    sgn = np.sign(x.data)
    out = sgn * np.where(mask, mag, 0.0).astype(x.data.dtype)

    def bw(g):
        accumulate(x, g * mask)
        accumulate(t, _unbroadcast(-g * sgn * mask, t.data.shape))

    return make_node(out, (x, t), bw)


def _wht2_seq(a: np.ndarray) -> np.ndarray:
    return sequency_reorder(fwht2_batch(a), "to_sequency")


def wht2d(x) -> DiffTensor:
    """Orthonormal sequency-ordered transform of the last two axes.

    The sequency-ordered transform matrix is symmetric, so the op is both
    self-inverse and self-adjoint: backward applies the same transform to
    the upstream gradient.
    """
    x = as_tensor(x)
    out = _wht2_seq(x.data)

    def bw(g):
        accumulate(x, _wht2_seq(g))

    return make_node(out, (x,), bw)


# -- losses ------------------------------------------------------------


def _reduce(t: DiffTensor, reduction: str) -> DiffTensor:
    if reduction == "mean":
        return t.mean()
    if reduction == "sum":
        return t.sum()
    if reduction == "none":
        return t
    raise ValueError(f"unknown reduction {reduction!r}")


def bce_with_logits(logits, targets, reduction: str = "mean") -> DiffTensor:
    """Binary cross-entropy on raw logits: softplus(z) - z*y, overflow-safe."""
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=z.data.dtype)
    if y.shape != z.data.shape:
        raise ValueError(f"targets shape {y.shape} does not match logits {z.data.shape}")
    return _reduce(softplus(z) - z * y, reduction)


def focal_with_logits(
    logits, targets, gamma: float = 2.0, alpha: float = 0.75, reduction: str = "mean"
) -> DiffTensor:
    """Focal loss on raw logits.

    gamma=0 skips the modulating factor and alpha=1 disables class
    weighting entirely, so that configuration evaluates the exact same
    expression graph as bce_with_logits.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    z = as_tensor(logits)
    y = np.asarray(targets, dtype=z.data.dtype)
    if y.shape != z.data.shape:
        raise ValueError(f"targets shape {y.shape} does not match logits {z.data.shape}")
    core = softplus(z) - z * y  # equals -log p_t for 0/1 targets
    loss = core
    if gamma != 0.0:
        p_t = (-core).exp()
        loss = (1.0 - p_t) ** gamma * loss
    if alpha != 1.0:
        a_t = y * alpha + (1.0 - y) * (1.0 - alpha)
        loss = loss * a_t
    return _reduce(loss, reduction)


# -- layer modules -----------------------------------------------------


def _kaiming_uniform(gen: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return gen.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        *,
        rng,
        dtype=np.float32,
    ):
        super().__init__()
        self.stride = int(stride)
        self.padding = int(padding)
        k = int(kernel_size)
        gen = rng.draw()
        self.w = DiffTensor(
            _kaiming_uniform(gen, (out_channels, in_channels, k, k), in_channels * k * k, dtype),
            requires_grad=True,
        )
        self.b = DiffTensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, *, dtype=np.float32):
        super().__init__()
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = DiffTensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = DiffTensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        return batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, *, rng, dtype=np.float32):
        super().__init__()
        gen = rng.draw()
        self.w = DiffTensor(
            _kaiming_uniform(gen, (out_features, in_features), in_features, dtype),
            requires_grad=True,
        )
        self.b = DiffTensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return linear(x, self.w, self.b)
