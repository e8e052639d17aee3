"""Differentiable operations for the denoising network.

The op set is deliberately exactly what the FiLM U-Net needs: conv2d, dense,
relu, maxpool2d, upsample_nearest, concat_channels, affine_modulate and
mse_loss.  All arrays are NCHW.  conv2d lowers to im2col plus one GEMM per
direction; the column buffer built in the forward pass is reused for the
weight gradient, and the input gradient scatters back with k*k strided
slice-adds, so the whole network runs on a handful of large matmuls.

Backward closures compute a gradient only for inputs that require one; in
particular the image input of the first convolution never pays for a
col2im pass.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, check_finite, record_op

__all__ = [
    "conv2d",
    "dense",
    "relu",
    "maxpool2d",
    "upsample_nearest",
    "concat_channels",
    "affine_modulate",
    "mse_loss",
]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_dtype(op: str, **named) -> None:
    dtypes = {name: t.dtype for name, t in named.items()}
    if len(set(dtypes.values())) > 1:
        detail = ", ".join(f"{k}={v}" for k, v in dtypes.items())
        raise ShapeError(f"{op} operands must share one dtype, got {detail}")


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-d convolution (cross-correlation), NCHW.

    ``w`` has shape (C_out, C_in, kh, kw) and ``b`` shape (C_out,).
    ``padding="same"`` zero-pads so output spatial size is ceil(size/stride)
    and requires odd kernel extents; ``"valid"`` uses no padding.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be (N, C, H, W), got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be (C_out, C_in, kh, kw), got shape {w.shape}")
    if b.ndim != 1:
        raise ShapeError(f"conv2d bias must be 1-d, got shape {b.shape}")
    n, c, h, width = x.shape
    c_out, c_in, kh, kw = w.shape
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {c_in}")
    if b.shape[0] != c_out:
        raise ShapeError(f"conv2d bias has {b.shape[0]} entries for {c_out} output channels")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ShapeError(f"conv2d stride must be a positive int, got {stride!r}")
    stride = int(stride)
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same padding requires odd kernel extents, got ({kh}, {kw})")
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
        if h < kh or width < kw:
            raise ShapeError(
                f"valid conv needs input at least kernel-sized, got {(h, width)} vs ({kh}, {kw})"
            )
    else:
        raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")
    _check_same_dtype("conv2d", x=x, w=w, b=b)

    xd = x.data
    if ph or pw:
        xd = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    hp, wp = xd.shape[2], xd.shape[3]
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1

    # (N, C, Hv, Wv, kh, kw) view, stride-subsampled, then one copy into
    # (N, C*kh*kw, H_out*W_out) column form.
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, h_out * w_out)
    w_mat = w.data.reshape(c_out, c * kh * kw)

    out_mat = np.matmul(w_mat, cols)
    out_mat += b.data[:, None]
    out = Tensor(out_mat.reshape(n, c_out, h_out, w_out))
    check_finite(out.data, "conv2d")

    x_req, w_req, b_req = x.requires_grad, w.requires_grad, b.requires_grad

    def bwd(g: np.ndarray):
        g2 = g.reshape(n, c_out, h_out * w_out)
        gb = g.sum(axis=(0, 2, 3)) if b_req else None
        gw = None
        if w_req:
            gw = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gx = None
        if x_req:
            gcols = np.matmul(w_mat.T, g2).reshape(n, c, kh, kw, h_out, w_out)
            gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki : ki + stride * h_out : stride,
                        kj : kj + stride * w_out : stride] += gcols[:, :, ki, kj]
            gx = gxp[:, :, ph : ph + h, pw : pw + width] if (ph or pw) else gxp
        return gx, gw, gb

    return record_op(out, (x, w, b), bwd)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine layer: ``x @ w.T + b`` with x (N, D_in), w (D_out, D_in), b (D_out,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2:
        raise ShapeError(f"dense input must be (N, D_in), got shape {x.shape}")
    if w.ndim != 2:
        raise ShapeError(f"dense weight must be (D_out, D_in), got shape {w.shape}")
    if b.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ShapeError(f"dense bias shape {b.shape} does not match D_out={w.shape[0]}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"dense feature mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}"
        )
    _check_same_dtype("dense", x=x, w=w, b=b)

    out = Tensor(x.data @ w.data.T + b.data)
    check_finite(out.data, "dense")
    x_req, w_req, b_req = x.requires_grad, w.requires_grad, b.requires_grad
    xd, wd = x.data, w.data

    def bwd(g: np.ndarray):
        gx = g @ wd if x_req else None
        gw = g.T @ xd if w_req else None
        gb = g.sum(axis=0) if b_req else None
        return gx, gw, gb

    return record_op(out, (x, w, b), bwd)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at 0 is taken as 0."""
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))
    check_finite(out.data, "relu")
    xd = x.data

    def bwd(g: np.ndarray):
        return (g * (xd > 0),)

    return record_op(out, (x,), bwd)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """k*k max pooling with stride k; spatial dims must divide by k.

    Within a tied window the gradient routes to the first maximum in
    row-major window order.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d input must be (N, C, H, W), got shape {x.shape}")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ShapeError(f"maxpool2d window must be a positive int, got {k!r}")
    k = int(k)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d needs H and W divisible by {k}, got ({h}, {w})")
    ho, wo = h // k, w // k

    windows = (
        x.data.reshape(n, c, ho, k, wo, k)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, k * k)
    )
    idx = windows.argmax(axis=-1)
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])
    check_finite(out.data, "maxpool2d")

    def bwd(g: np.ndarray):
        buf = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        gx = (
            buf.reshape(n, c, ho, wo, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return record_op(out, (x,), bwd)


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    """Nearest-neighbour upsampling by integer factor k; backward sums each k*k block."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest input must be (N, C, H, W), got shape {x.shape}")
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ShapeError(f"upsample_nearest factor must be a positive int, got {k!r}")
    k = int(k)
    n, c, h, w = x.shape
    expanded = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, k, w, k))
    out = Tensor(expanded.reshape(n, c, h * k, w * k))
    check_finite(out.data, "upsample_nearest")

    def bwd(g: np.ndarray):
        return (g.reshape(n, c, h, k, w, k).sum(axis=(3, 5)),)

    return record_op(out, (x,), bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; N, H, W must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(
            f"concat_channels needs two (N, C, H, W) tensors, got {a.shape} and {b.shape}"
        )
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels non-channel dims must match, got {a.shape} and {b.shape}"
        )
    _check_same_dtype("concat_channels", a=a, b=b)
    ca = a.shape[1]
    out = Tensor(np.concatenate((a.data, b.data), axis=1))

    def bwd(g: np.ndarray):
        return g[:, :ca], g[:, ca:]

    return record_op(out, (a, b), bwd)


def affine_modulate(r: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-sample, per-channel affine: ``r * gamma + beta`` broadcast over H, W.

    ``gamma`` and ``beta`` have shape (N, C).  With gamma all ones and beta
    all zeros this is an exact identity.
    """
    r, gamma, beta = _as_tensor(r), _as_tensor(gamma), _as_tensor(beta)
    if r.ndim != 4:
        raise ShapeError(f"affine_modulate input must be (N, C, H, W), got shape {r.shape}")
    n, c = r.shape[0], r.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (n, c):
            raise ShapeError(
                f"affine_modulate {name} must have shape {(n, c)}, got {t.shape}"
            )
    _check_same_dtype("affine_modulate", r=r, gamma=gamma, beta=beta)

    out_data = r.data * gamma.data[:, :, None, None]
    out_data += beta.data[:, :, None, None]
    out = Tensor(out_data)
    check_finite(out.data, "affine_modulate")
    r_req, g_req, b_req = r.requires_grad, gamma.requires_grad, beta.requires_grad
    rd, gd = r.data, gamma.data

    def bwd(g: np.ndarray):
        gr = g * gd[:, :, None, None] if r_req else None
        gg = (g * rd).sum(axis=(2, 3)) if g_req else None
        gb = g.sum(axis=(2, 3)) if b_req else None
        return gr, gg, gb

    return record_op(out, (r, gamma, beta), bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element; gradient is 2*(pred-target)/n."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(
            f"mse_loss shapes must match, got {pred.shape} and {target.shape}"
        )
    _check_same_dtype("mse_loss", pred=pred, target=target)
    diff = pred.data - target.data
    n = diff.size
    loss_val = np.mean(diff * diff, dtype=np.float64)
    out = Tensor(np.asarray(loss_val, dtype=pred.dtype))
    check_finite(out.data, "mse_loss")
    t_req = target.requires_grad

    def bwd(g: np.ndarray):
        gp = diff * (float(g) * 2.0 / n)
        gt = -gp if t_req else None
        return gp, gt

    return record_op(out, (pred, target), bwd)
