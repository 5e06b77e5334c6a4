"""Forward convolution kernels with a fixed floating-point summation order.

For every output element the kernel computes, for each input channel ``c``
in increasing order, the channel response

    phi_c = (((0 + K[o,c,0,0] * x[..]) + K[o,c,0,1] * x[..]) + ...)

accumulated in row-major kernel order, and then ``acc += s_c * phi_c``.
Fixing the order makes the result reproducible bit-for-bit against a plain
nested-loop evaluation.  Channels with ``s_c == 0`` are skipped; adding a
signed zero never changes a finite accumulator's value.

The numba kernel is used when numba is importable; the numpy fallback
performs exactly the same sequence of IEEE operations per element.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None


def _scaled_conv_numpy(xp, kernel, scale, stride, out):
    n_batch, n_in = xp.shape[0], xp.shape[1]
    n_out, _, kh, kw = kernel.shape
    ho, wo = out.shape[2], out.shape[3]
    phi = np.empty((n_batch, n_out, ho, wo))
    tmp = np.empty_like(phi)
    for c in range(n_in):
        sc = scale[c]
        if sc == 0.0:
            continue
        phi.fill(0.0)
        for h in range(kh):
            for w in range(kw):
                win = xp[:, c, h:h + stride * (ho - 1) + 1:stride, w:w + stride * (wo - 1) + 1:stride]
                np.multiply(kernel[None, :, c, h, w, None, None], win[:, None], out=tmp)
                phi += tmp
        np.multiply(sc, phi, out=tmp)
        out += tmp
    return out


if numba is not None:

    @numba.njit(cache=True, boundscheck=False)
    def _scaled_conv_s1(xp, kernel, scale, out):  # pragma: no cover - compiled
        n_batch, n_in = xp.shape[0], xp.shape[1]
        n_out, kh, kw = kernel.shape[0], kernel.shape[2], kernel.shape[3]
        ho, wo = out.shape[2], out.shape[3]
        phi = np.empty((ho, wo))
        for n in range(n_batch):
            for c in range(n_in):
                sc = scale[c]
                if sc == 0.0:
                    continue
                xc = xp[n, c]
                for o in range(n_out):
                    phi[:, :] = 0.0
                    for h in range(kh):
                        for w in range(kw):
                            kv = kernel[o, c, h, w]
                            for i in range(ho):
                                for j in range(wo):
                                    phi[i, j] += kv * xc[i + h, j + w]
                    acc = out[n, o]
                    for i in range(ho):
                        for j in range(wo):
                            acc[i, j] += sc * phi[i, j]
        return out

    @numba.njit(cache=True, boundscheck=False)
    def _scaled_conv_strided(xp, kernel, scale, stride, out):  # pragma: no cover - compiled
        n_batch, n_in = xp.shape[0], xp.shape[1]
        n_out, kh, kw = kernel.shape[0], kernel.shape[2], kernel.shape[3]
        ho, wo = out.shape[2], out.shape[3]
        phi = np.empty((ho, wo))
        for n in range(n_batch):
            for c in range(n_in):
                sc = scale[c]
                if sc == 0.0:
                    continue
                xc = xp[n, c]
                for o in range(n_out):
                    phi[:, :] = 0.0
                    for h in range(kh):
                        for w in range(kw):
                            kv = kernel[o, c, h, w]
                            for i in range(ho):
                                for j in range(wo):
                                    phi[i, j] += kv * xc[i * stride + h, j * stride + w]
                    acc = out[n, o]
                    for i in range(ho):
                        for j in range(wo):
                            acc[i, j] += sc * phi[i, j]
        return out


def scaled_conv_forward(xp: np.ndarray, kernel: np.ndarray, scale: np.ndarray, stride: int,
                        out_hw: tuple[int, int], use_numba: bool | None = None) -> np.ndarray:
    """Compute ``sum_c scale[c] * phi_c`` on an already padded input."""
    out = np.zeros((xp.shape[0], kernel.shape[0], out_hw[0], out_hw[1]))
    if out.size == 0:
        return out
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    scale = np.ascontiguousarray(scale, dtype=np.float64)
    if use_numba is None:
        use_numba = numba is not None
    if not use_numba:
        return _scaled_conv_numpy(xp, kernel, scale, stride, out)
    if stride == 1:
        return _scaled_conv_s1(xp, kernel, scale, out)
    return _scaled_conv_strided(xp, kernel, scale, stride, out)


def conv_input_grad(grad_out: np.ndarray, kernel: np.ndarray, stride: int,
                    padded_hw: tuple[int, int], padding: int) -> np.ndarray:
    """Gradient of the unscaled convolution wrt its (unpadded) input."""
    n_batch, n_out, ho, wo = grad_out.shape
    _, n_in, kh, kw = kernel.shape
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(n_out, -1)
    cols = (kernel.reshape(n_out, -1).T @ g2).reshape(n_in, kh, kw, n_batch, ho, wo)
    gp = np.zeros((n_batch, n_in, padded_hw[0], padded_hw[1]))
    for h in range(kh):
        for w in range(kw):
            gp[:, :, h:h + stride * (ho - 1) + 1:stride, w:w + stride * (wo - 1) + 1:stride] += \
                cols[:, h, w].transpose(1, 0, 2, 3)
    if padding:
        gp = gp[:, :, padding:-padding, padding:-padding]
    return gp


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows ordered (c, h, w); columns ordered (n, i, j)."""
    n_batch, n_in = xp.shape[:2]
    cols = np.empty((n_in, kh, kw, n_batch, ho, wo))
    for h in range(kh):
        for w in range(kw):
            win = xp[:, :, h:h + stride * (ho - 1) + 1:stride, w:w + stride * (wo - 1) + 1:stride]
            cols[:, h, w] = win.transpose(1, 0, 2, 3)
    return cols.reshape(n_in * kh * kw, -1)


def conv_kernel_grad(grad_out: np.ndarray, xp: np.ndarray, kernel_shape, stride: int) -> np.ndarray:
    """Gradient of the unscaled convolution wrt the kernel, given the padded input."""
    n_batch, n_out, ho, wo = grad_out.shape
    g2 = grad_out.transpose(1, 0, 2, 3).reshape(n_out, -1)
    cols = _im2col(xp, kernel_shape[2], kernel_shape[3], stride, ho, wo)
    return (g2 @ cols.T).reshape(kernel_shape)
