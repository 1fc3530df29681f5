"""Forward/backward kernels for the layer kinds used by :class:`Network`.

All arrays are laid out ``(N, C, D, H, W)`` with width fastest. Reductions that
span more than ``_CHUNK`` terms are accumulated in float64.
"""

import numpy as np

_CHUNK = 65536
_COLS = 2048


def _offsets(k, Hp, Wp):
    return [a * Hp * Wp + b * Wp + c for a in range(k) for b in range(k) for c in range(k)]


def _correlate_flat(xf, weight, shifts, M):
    """``out[:, j] = sum_o weight[:, :, o] @ xf[:, j + shifts[o]]`` for j < M.

    Wide-input layers use one GEMM per kernel plane followed by shifted adds;
    the rest use chunked im2col, which keeps the column buffer cache-sized.
    """
    Co, Ci = weight.shape[:2]
    K = len(shifts)
    if Ci >= 2 * Co:
        wstack = np.ascontiguousarray(weight.transpose(2, 3, 4, 0, 1).reshape(K * Co, Ci))
        per_group = weight.shape[2] ** 2
        acc = np.zeros((Co, M), dtype=xf.dtype)
        for g0 in range(0, K, per_group):
            Y = wstack[g0 * Co:(g0 + per_group) * Co] @ xf
            for j, s in enumerate(shifts[g0:g0 + per_group]):
                acc += Y[j * Co:(j + 1) * Co, s:s + M]
        return acc
    w2 = np.ascontiguousarray(weight.transpose(0, 2, 3, 4, 1).reshape(Co, K * Ci))
    out = np.empty((Co, M), dtype=xf.dtype)
    cols = np.empty((K * Ci, _COLS), dtype=xf.dtype)
    for c0 in range(0, M, _COLS):
        c1 = min(M, c0 + _COLS)
        n = c1 - c0
        for o, s in enumerate(shifts):
            cols[o * Ci:(o + 1) * Ci, :n] = xf[:, s + c0:s + c1]
        np.matmul(w2, cols[:, :n], out=out[:, c0:c1])
    return out


def _conv_same(x, weight):
    """Same-padded stride-1 cross-correlation without bias; returns (out, padded x)."""
    N, Ci, D, H, W = x.shape
    Co, _, k = weight.shape[:3]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    Hp, Wp = H + 2 * p, W + 2 * p
    # last valid output sits at flat index (D-1, H-1, W-1) of the padded grid
    M = (D - 1) * Hp * Wp + (H - 1) * Wp + W
    shifts = _offsets(k, Hp, Wp)
    out = np.empty((N, Co, D, H, W), dtype=x.dtype)
    full = np.zeros((Co, D * Hp * Wp), dtype=x.dtype)
    for n in range(N):
        full[:, :M] = _correlate_flat(xp[n].reshape(Ci, -1), weight, shifts, M)
        out[n] = full.reshape(Co, D, Hp, Wp)[:, :, :H, :W]
    return out, xp


def conv3d_forward(x, weight, bias):
    """Same-padded stride-1 3D convolution (cross-correlation).

    Every kernel offset is a constant shift of the flat index on the padded
    grid, so no per-voxel gather is needed. Returns ``(out, cache)``.
    """
    N, Ci, D, H, W = x.shape
    Co = weight.shape[0]
    if weight.shape[2] == 1:
        out = np.matmul(weight.reshape(Co, Ci), x.reshape(N, Ci, -1)).reshape(N, Co, D, H, W)
        xp = None
    else:
        out, xp = _conv_same(x, weight)
    out += bias.reshape(1, Co, 1, 1, 1)
    return out, (x, xp)


def conv3d_backward(dout, weight, cache, need_input_grad=True):
    """Returns ``(dx, dweight, dbias)`` for :func:`conv3d_forward`.

    The input gradient of a same-padded correlation is a same-padded
    correlation of ``dout`` with the flipped, channel-transposed kernel.
    """
    x, xp = cache
    N, Ci, D, H, W = x.shape
    Co, _, k = weight.shape[:3]
    dtype = x.dtype
    dbias = dout.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(dtype)

    if k == 1:
        w2 = weight.reshape(Co, Ci)
        g = dout.reshape(N, Co, -1)
        xf = x.reshape(N, Ci, -1)
        dx = np.matmul(w2.T, g).reshape(x.shape) if need_input_grad else None
        dw = np.zeros((Ci, Co), dtype=np.float64)
        for n in range(N):
            for c0 in range(0, g.shape[2], _CHUNK):
                dw += xf[n, :, c0:c0 + _CHUNK] @ g[n, :, c0:c0 + _CHUNK].T
        return dx, dw.T.reshape(weight.shape).astype(dtype), dbias

    dx = None
    if need_input_grad:
        flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        dx, _ = _conv_same(dout, flipped)

    p = k // 2
    Hp, Wp = H + 2 * p, W + 2 * p
    M = (D - 1) * Hp * Wp + (H - 1) * Wp + W
    shifts = _offsets(k, Hp, Wp)
    dw = np.zeros((len(shifts), Ci, Co), dtype=np.float64)
    gfull = np.zeros((Co, D, Hp, Wp), dtype=dtype)
    for n in range(N):
        gfull[:, :, :H, :W] = dout[n]
        gM = gfull.reshape(Co, -1)[:, :M]
        xf = xp[n].reshape(Ci, -1)
        for c0 in range(0, M, _CHUNK):
            c1 = min(M, c0 + _CHUNK)
            gT = np.ascontiguousarray(gM[:, c0:c1].T)
            for o, s in enumerate(shifts):
                dw[o] += xf[:, s + c0:s + c1] @ gT
    dweight = dw.reshape(k, k, k, Ci, Co).transpose(4, 3, 0, 1, 2).astype(dtype)
    return dx, dweight, dbias


def batchnorm_forward(x, scale, shift, running_mean, running_var, *, use_batch_stats,
                      update_running, momentum=0.1, eps=1e-5):
    """Per-channel normalisation. Mutates the running buffers in place when
    ``update_running`` is set. Returns ``(out, cache)``."""
    C = x.shape[1]
    bshape = (1, C, 1, 1, 1)
    if use_batch_stats:
        axes = (0, 2, 3, 4)
        count = x.size // C
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        if update_running:
            unbiased = var * count / max(count - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mean.astype(running_mean.dtype)
            running_var *= 1 - momentum
            running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.astype(x.dtype).reshape(bshape)) * inv_std.astype(x.dtype).reshape(bshape)
    out = xhat * scale.reshape(bshape) + shift.reshape(bshape)
    return out, (xhat, inv_std, use_batch_stats)


def batchnorm_backward(dout, scale, cache):
    xhat, inv_std, batch_stats = cache
    C = dout.shape[1]
    bshape = (1, C, 1, 1, 1)
    axes = (0, 2, 3, 4)
    dshift = dout.sum(axis=axes, dtype=np.float64)
    dscale = (dout * xhat).sum(axis=axes, dtype=np.float64)
    k = (scale.astype(np.float64) * inv_std)
    if batch_stats:
        count = dout.size // C
        # dx = k/M * (M*g - sum(g) - xhat*sum(g*xhat))
        mg = (dshift / count).astype(dout.dtype).reshape(bshape)
        mgx = (dscale / count).astype(dout.dtype).reshape(bshape)
        dx = (dout - mg - xhat * mgx) * k.astype(dout.dtype).reshape(bshape)
    else:
        dx = dout * k.astype(dout.dtype).reshape(bshape)
    return dx, dscale.astype(dout.dtype), dshift.astype(dout.dtype)


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def _blocks(x):
    N, C, D, H, W = x.shape
    return (x.reshape(N, C, D // 2, 2, H // 2, 2, W // 2, 2)
            .transpose(0, 1, 2, 4, 6, 3, 5, 7)
            .reshape(N, C, D // 2, H // 2, W // 2, 8))


def maxpool_forward(x):
    """2x2x2 max pooling. Ties route the gradient to the first element."""
    b = _blocks(x)
    idx = b.argmax(axis=-1)
    out = np.take_along_axis(b, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool_backward(dout, cache):
    idx, shape = cache
    N, C, D, H, W = shape
    b = np.zeros(idx.shape + (8,), dtype=dout.dtype)
    np.put_along_axis(b, idx[..., None], dout[..., None], axis=-1)
    return (b.reshape(N, C, D // 2, H // 2, W // 2, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(shape))


def upsample_forward(x):
    """Nearest-neighbour x2 upsampling along every spatial axis."""
    N, C, D, H, W = x.shape
    out = np.broadcast_to(x[:, :, :, None, :, None, :, None],
                          (N, C, D, 2, H, 2, W, 2))
    return out.reshape(N, C, 2 * D, 2 * H, 2 * W)


def upsample_backward(dout):
    N, C, D, H, W = dout.shape
    return dout.reshape(N, C, D // 2, 2, H // 2, 2, W // 2, 2).sum(axis=(3, 5, 7))


def softmax_forward(x):
    z = x - x.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def softmax_backward(dout, probs):
    return probs * (dout - (dout * probs).sum(axis=1, keepdims=True))
