"""Network layers: convolutions, anti-aliased downsampling, upsampling,
instance normalization, spatial dropout and channel softmax.

Every functional op records its own backward rule on the autograd graph.
conv2d carries two arithmetic paths: a loop with a fixed summation order
(bit-reproducible against a naive reference, the float64 default) and a
BLAS-backed path (the float32 default, used for training throughput).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, from_op

__all__ = [
    "Module", "ModuleList", "Conv2d", "ConvTranspose2d", "InstanceNorm",
    "GaussianKernel", "conv2d", "transpose_conv2d", "maxpool2d",
    "gaussian_blurpool", "spatial_dropout", "softmax_channels", "norm_layer",
]


class Module:
    """Parameter container; tensors and submodules register on assignment."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _out_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _conv_geometry(x_shape, w_shape, stride, padding):
    n, c, h, w = x_shape
    o, ci, kh, kw = w_shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {ci}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"non-positive output extent {ho}x{wo}")
    return n, c, h, w, o, kh, kw, ho, wo


def _im2col(xp, kh, kw, stride, ho, wo):
    # (N, C, Hp, Wp) -> (N*Ho*Wo, C*kh*kw), one contiguous copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        xp.shape[0] * ho * wo, -1)


def _conv_forward_gemm(x, w, stride, padding, saved: dict = None):
    n, c, h, wd, o, kh, kw, ho, wo = _conv_geometry(x.shape, w.shape,
                                                    stride, padding)
    xp = _pad_nchw(x, padding)
    col = _im2col(xp, kh, kw, stride, ho, wo)
    if saved is not None:
        saved["col"] = col  # reused by backward, skipping a second gather
    out = col @ w.reshape(o, -1).T
    return np.ascontiguousarray(
        out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def _conv_backward_gemm(g, x, w, stride, padding, saved: dict = None,
                        need_dx: bool = True):
    n, c, h, wd, o, kh, kw, ho, wo = _conv_geometry(x.shape, w.shape,
                                                    stride, padding)
    if saved is not None and "col" in saved:
        col = saved.pop("col")
    else:
        col = _im2col(_pad_nchw(x, padding), kh, kw, stride, ho, wo)
    gcol = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
    dw = (gcol.T @ col).reshape(w.shape)
    if not need_dx:
        return None, dw
    dcol = (gcol @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    # scatter in NHWC so every add is axis-aligned, transpose once at the end
    hp, wp = h + 2 * padding, wd + 2 * padding
    dxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
    for ki in range(kh):
        for kj in range(kw):
            hs = slice(ki, ki + stride * (ho - 1) + 1, stride)
            ws = slice(kj, kj + stride * (wo - 1) + 1, stride)
            dxp[:, hs, ws, :] += dcol[:, :, :, :, ki, kj]
    dxp = np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + wd], dw
    return dxp, dw


def _conv_forward_looped(x, w, stride, padding):
    # accumulation order is (in_channel, ki, kj) per output element, so the
    # result is bit-identical to a naive nested-loop reference at any dtype
    n, c, h, wd, o, kh, kw, ho, wo = _conv_geometry(x.shape, w.shape,
                                                    stride, padding)
    xp = _pad_nchw(x, padding)
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for ic in range(c):
        xc = xp[:, ic]
        for ki in range(kh):
            for kj in range(kw):
                xs = xc[:, ki:ki + stride * (ho - 1) + 1:stride,
                        kj:kj + stride * (wo - 1) + 1:stride]
                out += xs[:, None] * w[None, :, ic, ki, kj, None, None]
    return out


def _conv_backward_looped(g, x, w, stride, padding):
    n, c, h, wd, o, kh, kw, ho, wo = _conv_geometry(x.shape, w.shape,
                                                    stride, padding)
    xp = _pad_nchw(x, padding)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for ic in range(c):
        xc = xp[:, ic]
        for ki in range(kh):
            for kj in range(kw):
                hs = slice(ki, ki + stride * (ho - 1) + 1, stride)
                ws = slice(kj, kj + stride * (wo - 1) + 1, stride)
                xs = xc[:, hs, ws]
                prod = g * xs[:, None]
                dw[:, ic, ki, kj] = prod.sum(axis=(0, 2, 3))
                dxp[:, ic, hs, ws] += (g * w[None, :, ic, ki, kj, None, None]
                                       ).sum(axis=1)
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + wd], dw
    return dxp, dw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor = None,
           stride: int = 1, padding: int = 0, method: str = "auto") -> Tensor:
    """2-d cross-correlation, NCHW layout, weight (out_ch, in_ch, kh, kw).

    method: "looped" fixes the per-element summation order (reproducible
    against a naive reference), "gemm" reduces channels through BLAS,
    "auto" picks looped for float64 and gemm otherwise.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    if x.dtype != weight.dtype:
        raise TypeError("conv2d dtype mismatch between input and weight")
    if method == "auto":
        method = "looped" if x.dtype == np.float64 else "gemm"
    if method not in ("looped", "gemm"):
        raise ValueError(f"unknown conv method {method!r}")
    x_data, w_data = x.data, weight.data
    if method == "looped":
        out = _conv_forward_looped(x_data, w_data, stride, padding)

        def back_xw(g):
            return _conv_backward_looped(g, x_data, w_data, stride, padding)
    else:
        saved = {} if (x.requires_grad or weight.requires_grad) else None
        need_dx = x.requires_grad
        out = _conv_forward_gemm(x_data, w_data, stride, padding, saved)

        def back_xw(g):
            return _conv_backward_gemm(g, x_data, w_data, stride, padding,
                                       saved, need_dx)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError("bias must have one entry per output channel")
        out = out + bias.data[None, :, None, None]

        def back(g):
            dx, dw = back_xw(g)
            return dx, dw, g.sum(axis=(0, 2, 3))

        return from_op(out, "conv2d", (x, weight, bias), back)

    def back(g):
        return back_xw(g)

    return from_op(out, "conv2d", (x, weight), back)


def transpose_conv2d(x: Tensor, weight: Tensor, bias: Tensor = None,
                     stride: int = 2, padding: int = 1,
                     output_padding: int = 1) -> Tensor:
    """Transposed 2-d convolution, weight (in_ch, out_ch, kh, kw).

    The default geometry (k=3, s=2, p=1, output_padding=1) doubles both
    spatial extents. The operator is the exact adjoint of conv2d with the
    same kernel/stride/padding.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("transpose_conv2d expects 4-d input and weight")
    if x.dtype != weight.dtype:
        raise TypeError("transpose_conv2d dtype mismatch")
    n, c, h, w = x.shape
    ci, co, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {ci}")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho < 1 or wo < 1:
        raise ValueError(f"non-positive output extent {ho}x{wo}")
    # scatter canvas: large enough for both the natural footprint and the
    # requested output window [padding, padding + out_extent)
    hf = max((h - 1) * stride + kh, padding + ho)
    wf = max((w - 1) * stride + kw, padding + wo)

    x_data, w_data = x.data, weight.data

    full = np.zeros((n, co, hf, wf), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            contrib = np.tensordot(x_data, w_data[:, :, ki, kj],
                                   axes=([1], [0]))
            full[:, :, ki:ki + stride * (h - 1) + 1:stride,
                 kj:kj + stride * (w - 1) + 1:stride] += np.moveaxis(contrib, 3, 1)
    out = np.ascontiguousarray(
        full[:, :, padding:padding + ho, padding:padding + wo])
    if bias is not None:
        if bias.shape != (co,):
            raise ValueError("bias must have one entry per output channel")
        out = out + bias.data[None, :, None, None]

    def back_x_w(g):
        dfull = np.zeros((n, co, hf, wf), dtype=g.dtype)
        dfull[:, :, padding:padding + ho, padding:padding + wo] = g
        dx = np.zeros_like(x_data)
        dw = np.zeros_like(w_data)
        for ki in range(kh):
            for kj in range(kw):
                ds = dfull[:, :, ki:ki + stride * (h - 1) + 1:stride,
                           kj:kj + stride * (w - 1) + 1:stride]
                dx += np.moveaxis(
                    np.tensordot(ds, w_data[:, :, ki, kj], axes=([1], [1])),
                    3, 1)
                dw[:, :, ki, kj] = np.tensordot(x_data, ds,
                                                axes=([0, 2, 3], [0, 2, 3]))
        return dx, dw

    if bias is not None:
        def back(g):
            dx, dw = back_x_w(g)
            return dx, dw, g.sum(axis=(0, 2, 3))

        return from_op(out, "transpose_conv2d", (x, weight, bias), back)

    return from_op(out, "transpose_conv2d", (x, weight), back_x_w)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; the gradient routes to the first maximal element in
    row-major window order."""
    if x.ndim != 4:
        raise ValueError("maxpool2d expects a 4-d tensor")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise ValueError(f"pool window {kernel} larger than input {h}x{w}")
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def back(g):
        ni, ci, oi, oj = np.ogrid[:n, :c, :ho, :wo]
        ih = oi * stride + arg // kernel
        iw = oj * stride + arg % kernel
        flat = ((ni * c + ci) * h + ih) * w + iw
        dx = np.bincount(flat.ravel(), weights=g.ravel(),
                         minlength=n * c * h * w)
        return (dx.reshape(n, c, h, w).astype(g.dtype, copy=False),)

    return from_op(out, "maxpool2d", (x,), back)


class GaussianKernel:
    """Fixed, normalized 2-d Gaussian filter taps.

    The weights are symmetric under horizontal, vertical and transpose
    reflection, sum to one, and are never registered as parameters, so no
    optimizer can touch them.
    """

    def __init__(self, size: int = 5, sigma: float = 1.25):
        if size < 1 or size % 2 == 0:
            raise ValueError("kernel size must be odd and positive")
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.size = size
        self.sigma = sigma
        r = size // 2
        d = np.arange(-r, r + 1, dtype=np.float64)
        g2 = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma ** 2))
        self.weights = g2 / g2.sum()


def _fold_reflect(dxp: np.ndarray, pad: int) -> np.ndarray:
    """Adjoint of reflect padding: mirror the pad-border gradient back
    into the interior."""
    if pad == 0:
        return dxp
    for axis in (2, 3):
        core = dxp[(slice(None),) * axis + (slice(pad, dxp.shape[axis] - pad),)]
        n_in = core.shape[axis]
        left = dxp[(slice(None),) * axis + (slice(0, pad),)]
        right = dxp[(slice(None),) * axis + (slice(pad + n_in, None),)]
        flip = (slice(None),) * axis + (slice(None, None, -1),)
        core[(slice(None),) * axis + (slice(1, pad + 1),)] += left[flip]
        core[(slice(None),) * axis + (slice(n_in - pad - 1, n_in - 1),)] += \
            right[flip]
        dxp = core
    return dxp


def _depthwise_fixed_conv(x: Tensor, taps: np.ndarray, stride: int,
                          padding: int) -> Tensor:
    """Depthwise convolution with a fixed (non-trainable) kernel and
    reflection padding, so constant inputs stay constant."""
    n, c, h, w = x.shape
    k = taps.shape[0]
    ho = _out_extent(h, k, stride, padding)
    wo = _out_extent(w, k, stride, padding)
    if ho < 1 or wo < 1 or h <= padding or w <= padding:
        raise ValueError("input too small for the fixed filter")
    kk = taps.astype(x.data.dtype)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding),
                         (padding, padding)), mode="reflect")
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            out += xp[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                      kj:kj + stride * (wo - 1) + 1:stride] * kk[ki, kj]

    def back(g):
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki:ki + stride * (ho - 1) + 1:stride,
                    kj:kj + stride * (wo - 1) + 1:stride] += g * kk[ki, kj]
        return (np.ascontiguousarray(_fold_reflect(dxp, padding)),)

    return from_op(out, "depthwise_fixed", (x,), back)


def gaussian_blurpool(x: Tensor, kernel: GaussianKernel = None) -> Tensor:
    """Anti-aliased 2x downsampling: max pool (k=2, s=1) then a fixed
    Gaussian filter at stride 2, padding 2. Channel count is preserved;
    only the input receives gradient."""
    if kernel is None:
        kernel = GaussianKernel()
    n, c, h, w = x.shape
    if h < 6 or w < 6:
        raise ValueError(f"gaussian_blurpool needs spatial extents >= 6, "
                         f"got {h}x{w}")
    m = maxpool2d(x, kernel=2, stride=1)
    return _depthwise_fixed_conv(m, kernel.weights, stride=2,
                                 padding=kernel.size // 2)


def spatial_dropout(x: Tensor, p: float, training: bool,
                    rng: np.random.Generator = None) -> Tensor:
    """Zero whole (sample, channel) planes with probability p during
    training, scaling survivors by 1/(1-p); identity at inference."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} out of range [0, 1)")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode spatial_dropout needs an explicit rng")
    n, c = x.shape[0], x.shape[1]
    keep = rng.random((n, c)) >= p
    scale = 1.0 / (1.0 - p)
    mask = (keep.astype(x.data.dtype) * x.dtype.type(scale))[:, :, None, None]
    out = x.data * mask

    def back(g):
        return (g * mask,)

    return from_op(out, "spatial_dropout", (x,), back)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-voxel softmax over the channel axis, max-subtracted for
    stability."""
    if x.ndim != 4:
        raise ValueError("softmax_channels expects a 4-d tensor")
    if x.shape[1] < 2:
        raise ValueError("softmax_channels needs at least two channels")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return from_op(p, "softmax_channels", (x,), back)


def norm_layer(x: Tensor, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Instance normalization: per (sample, channel) statistics over the
    spatial extent, then learnable per-channel scale and shift."""
    if x.ndim != 4:
        raise ValueError("norm_layer expects a 4-d tensor")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"channel mismatch: input has {c} channels, "
                         f"scale/shift have {gamma.shape}/{beta.shape}")
    d = x.data
    mu = d.mean(axis=(2, 3), keepdims=True)
    var = d.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (d - mu) * inv
    g4 = gamma.data[None, :, None, None]
    out = g4 * xhat + beta.data[None, :, None, None]
    m = h * w

    def back(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxh = g * g4
        s1 = dxh.sum(axis=(2, 3), keepdims=True)
        s2 = (dxh * xhat).sum(axis=(2, 3), keepdims=True)
        dx = (inv / m) * (m * dxh - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return from_op(out, "norm_layer", (x, gamma, beta), back)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: np.random.Generator = None, dtype=np.float32):
        super().__init__()
        if rng is None:
            raise ValueError("Conv2d needs an explicit rng for initialization")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        w = he_normal(rng, (out_channels, in_channels, kernel, kernel),
                      fan_in=in_channels * kernel * kernel, dtype=dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype),
                           requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 2, padding: int = 1, output_padding: int = 1,
                 bias: bool = True, rng: np.random.Generator = None,
                 dtype=np.float32):
        super().__init__()
        if rng is None:
            raise ValueError("ConvTranspose2d needs an explicit rng")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        w = he_normal(rng, (in_channels, out_channels, kernel, kernel),
                      fan_in=in_channels * kernel * kernel, dtype=dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype),
                           requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return transpose_conv2d(x, self.weight, self.bias, self.stride,
                                self.padding, self.output_padding)


class InstanceNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return norm_layer(x, self.gamma, self.beta, self.eps)
