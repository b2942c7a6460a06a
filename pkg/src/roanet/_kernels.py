"""Hot-loop kernels for bilinear sampling.

Numba-compiled when available (parallelized over the batch axis, which keeps
writes race-free), with vectorized numpy fallbacks that compute the exact same
quantities. Out-of-bounds sample corners contribute zero, matching the
zero-padding convention used by the convolution ops.
"""

import numpy as np

try:
    import numba
    from numba import njit, prange

    # Prefer omp/workqueue: probing TBB first warns on every run when the
    # installed TBB is older than numba wants.
    try:
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    except Exception:  # pragma: no cover - config knob absent on old numba
        pass

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap

    prange = range


@njit(parallel=True, fastmath=False, cache=True)
def _gather_jit(x, ys, xs, out):
    # x: (N,C,H,W), ys/xs: (N,P), out: (N,C,P)
    N, C, H, W = x.shape
    P = ys.shape[1]
    for n in prange(N):
        for p in range(P):
            y = ys[n, p]
            xx = xs[n, p]
            y0 = int(np.floor(y))
            x0 = int(np.floor(xx))
            fy = y - y0
            fx = xx - x0
            w00 = (1.0 - fy) * (1.0 - fx)
            w01 = (1.0 - fy) * fx
            w10 = fy * (1.0 - fx)
            w11 = fy * fx
            y1 = y0 + 1
            x1 = x0 + 1
            for c in range(C):
                acc = 0.0
                if 0 <= y0 < H:
                    if 0 <= x0 < W:
                        acc += w00 * x[n, c, y0, x0]
                    if 0 <= x1 < W:
                        acc += w01 * x[n, c, y0, x1]
                if 0 <= y1 < H:
                    if 0 <= x0 < W:
                        acc += w10 * x[n, c, y1, x0]
                    if 0 <= x1 < W:
                        acc += w11 * x[n, c, y1, x1]
                out[n, c, p] = acc


@njit(parallel=True, fastmath=False, cache=True)
def _scatter_jit(g, ys, xs, gx):
    # g: (N,C,P) upstream grad, gx: (N,C,H,W) accumulator
    N, C, H, W = gx.shape
    P = ys.shape[1]
    for n in prange(N):
        for p in range(P):
            y = ys[n, p]
            xx = xs[n, p]
            y0 = int(np.floor(y))
            x0 = int(np.floor(xx))
            fy = y - y0
            fx = xx - x0
            w00 = (1.0 - fy) * (1.0 - fx)
            w01 = (1.0 - fy) * fx
            w10 = fy * (1.0 - fx)
            w11 = fy * fx
            y1 = y0 + 1
            x1 = x0 + 1
            for c in range(C):
                gv = g[n, c, p]
                if 0 <= y0 < H:
                    if 0 <= x0 < W:
                        gx[n, c, y0, x0] += w00 * gv
                    if 0 <= x1 < W:
                        gx[n, c, y0, x1] += w01 * gv
                if 0 <= y1 < H:
                    if 0 <= x0 < W:
                        gx[n, c, y1, x0] += w10 * gv
                    if 0 <= x1 < W:
                        gx[n, c, y1, x1] += w11 * gv


@njit(parallel=True, fastmath=False, cache=True)
def _coord_grad_jit(x, g, ys, xs, gy_out, gx_out):
    # d(sample)/d(coordinate), summed over channels with upstream grad g.
    N, C, H, W = x.shape
    P = ys.shape[1]
    for n in prange(N):
        for p in range(P):
            y = ys[n, p]
            xx = xs[n, p]
            y0 = int(np.floor(y))
            x0 = int(np.floor(xx))
            fy = y - y0
            fx = xx - x0
            y1 = y0 + 1
            x1 = x0 + 1
            gy = 0.0
            gxv = 0.0
            for c in range(C):
                v00 = x[n, c, y0, x0] if (0 <= y0 < H and 0 <= x0 < W) else 0.0
                v01 = x[n, c, y0, x1] if (0 <= y0 < H and 0 <= x1 < W) else 0.0
                v10 = x[n, c, y1, x0] if (0 <= y1 < H and 0 <= x0 < W) else 0.0
                v11 = x[n, c, y1, x1] if (0 <= y1 < H and 0 <= x1 < W) else 0.0
                gv = g[n, c, p]
                gy += gv * (-(1.0 - fx) * v00 - fx * v01 + (1.0 - fx) * v10 + fx * v11)
                gxv += gv * (-(1.0 - fy) * v00 + (1.0 - fy) * v01 - fy * v10 + fy * v11)
            gy_out[n, p] = gy
            gx_out[n, p] = gxv


def _corner_terms(x, ys, xs):
    """Corner indices, weights and validity masks shared by the numpy paths."""
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    H, W = x.shape[2], x.shape[3]
    corners = []
    for dy, dx, w in (
        (0, 0, (1.0 - fy) * (1.0 - fx)),
        (0, 1, (1.0 - fy) * fx),
        (1, 0, fy * (1.0 - fx)),
        (1, 1, fy * fx),
    ):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        corners.append((np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1), w, valid))
    return corners, fy, fx


def _gather_np(x, ys, xs):
    N, C = x.shape[0], x.shape[1]
    P = ys.shape[1]
    out = np.zeros((N, C, P), dtype=x.dtype)
    corners, _, _ = _corner_terms(x, ys, xs)
    nidx = np.arange(N)[:, None]
    for yi, xi, w, valid in corners:
        vals = x[nidx, :, yi, xi]  # (N,P,C)
        out += np.where(valid[:, None, :], w[:, None, :] * vals.transpose(0, 2, 1), 0.0)
    return out


def _scatter_np(x_shape, g, ys, xs, dtype):
    N, C, H, W = x_shape
    gx = np.zeros(N * C * H * W, dtype=np.float64)
    corners, _, _ = _corner_terms(np.empty(x_shape, dtype=dtype), ys, xs)
    for yi, xi, w, valid in corners:
        spatial = yi * W + xi  # (N,P)
        contrib = np.where(valid[:, None, :], w[:, None, :] * g, 0.0)  # (N,C,P)
        for c in range(C):
            idx = (np.arange(N)[:, None] * C + c) * (H * W) + spatial
            gx += np.bincount(idx.ravel(), weights=contrib[:, c, :].ravel(), minlength=gx.size)
    return gx.reshape(N, C, H, W).astype(dtype)


def _coord_grad_np(x, g, ys, xs):
    N = x.shape[0]
    P = ys.shape[1]
    corners, fy, fx = _corner_terms(x, ys, xs)
    nidx = np.arange(N)[:, None]
    vals = []
    for yi, xi, _, valid in corners:
        v = x[nidx, :, yi, xi].transpose(0, 2, 1)  # (N,C,P)
        vals.append(np.where(valid[:, None, :], v, 0.0))
    v00, v01, v10, v11 = vals
    fy_ = fy[:, None, :]
    fx_ = fx[:, None, :]
    gy = (g * (-(1.0 - fx_) * v00 - fx_ * v01 + (1.0 - fx_) * v10 + fx_ * v11)).sum(axis=1)
    gx = (g * (-(1.0 - fy_) * v00 + (1.0 - fy_) * v01 - fy_ * v10 + fy_ * v11)).sum(axis=1)
    return gy.astype(x.dtype), gx.astype(x.dtype)


def gather(x, ys, xs):
    """Bilinear-sample all channels of x at (ys, xs); returns (N, C, P)."""
    if HAVE_NUMBA:
        out = np.empty((x.shape[0], x.shape[1], ys.shape[1]), dtype=x.dtype)
        _gather_jit(np.ascontiguousarray(x), np.ascontiguousarray(ys), np.ascontiguousarray(xs), out)
        return out
    return _gather_np(x, ys, xs)


def scatter(x_shape, g, ys, xs, dtype):
    """Adjoint of gather: accumulate upstream grads g into an (N,C,H,W) array."""
    if HAVE_NUMBA:
        gx = np.zeros(x_shape, dtype=dtype)
        _scatter_jit(np.ascontiguousarray(g), np.ascontiguousarray(ys), np.ascontiguousarray(xs), gx)
        return gx
    return _scatter_np(x_shape, g, ys, xs, dtype)


def coord_grad(x, g, ys, xs):
    """Gradients of the sampled values w.r.t. the (y, x) coordinates."""
    if HAVE_NUMBA:
        gy = np.empty_like(ys)
        gx = np.empty_like(xs)
        _coord_grad_jit(
            np.ascontiguousarray(x),
            np.ascontiguousarray(g),
            np.ascontiguousarray(ys),
            np.ascontiguousarray(xs),
            gy,
            gx,
        )
        return gy, gx
    return _coord_grad_np(x, g, ys, xs)
