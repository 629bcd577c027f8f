"""Reference implementations used only by the tests.

Everything here is written as plain loops over the textbook definitions so it
shares no code path with the package under test.
"""

import math

import numpy as np

from msrefine import tensor as T


def naive_conv2d(x, w, b, stride, padding):
    C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((C, H + 2 * padding, W + 2 * padding))
    xp[:, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


def naive_transposed_conv2d(x, w, b, stride, padding):
    C, H, W = x.shape
    _, O, k, _ = w.shape
    full = np.zeros((O, (H - 1) * stride + k, (W - 1) * stride + k))
    for c in range(C):
        for i in range(H):
            for j in range(W):
                full[:, i * stride:i * stride + k, j * stride:j * stride + k] += x[c, i, j] * w[c]
    Ho, Wo = full.shape[1] - 2 * padding, full.shape[2] - 2 * padding
    out = full[:, padding:padding + Ho, padding:padding + Wo]
    if b is not None:
        out = out + b[:, None, None]
    return out


def naive_blur(img, kernel):
    r = len(kernel) // 2
    C, H, W = img.shape
    padded = np.pad(img, ((0, 0), (r, r), (r, r)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            out += kernel[dy + r] * kernel[dx + r] * padded[:, r + dy:r + dy + H, r + dx:r + dx + W]
    return out


def naive_resize(img, out_h, out_w):
    C, H, W = img.shape
    out = np.zeros((C, out_h, out_w))

    def coord(i, n_in, n_out):
        s = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(s))
        hi = min(lo + 1, n_in - 1)
        return lo, hi, s - lo

    for i in range(out_h):
        y0, y1, fy = coord(i, H, out_h)
        for j in range(out_w):
            x0, x1, fx = coord(j, W, out_w)
            out[:, i, j] = ((1 - fy) * (1 - fx) * img[:, y0, x0] + (1 - fy) * fx * img[:, y0, x1]
                            + fy * (1 - fx) * img[:, y1, x0] + fy * fx * img[:, y1, x1])
    return out


def naive_erode(mask, radius):
    m = np.asarray(mask) > 0
    H, W = m.shape
    out = np.zeros_like(m)
    for i in range(H):
        for j in range(W):
            ok = True
            for dy in range(-radius, radius + 1):
                for dx in range(-radius, radius + 1):
                    if dy * dy + dx * dx > radius * radius:
                        continue
                    y, x = i + dy, j + dx
                    if not (0 <= y < H and 0 <= x < W) or not m[y, x]:
                        ok = False
                        break
                if not ok:
                    break
            out[i, j] = ok
    return out.astype(np.uint8)


def finite_difference_grads(fn, arrays, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. every element of every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = fn(*arrays)
            a[idx] = orig - h
            fm = fn(*arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def gradient_check(op, arrays, rng, h=1e-5):
    """Relative error between autodiff and central differences for ``op``.

    ``op`` maps Tensors to a Tensor; the scalar objective is a fixed random
    projection of its output. Returns the worst relative error over inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [T.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    out = op(*tensors)
    proj = rng.standard_normal(out.shape)
    loss = T.tsum(T.mul(out, T.Tensor(proj, dtype=np.float64))) if out.ndim else out
    loss.backward()

    def objective(*arrs):
        with T.no_grad():
            o = op(*[T.Tensor(a, dtype=np.float64) for a in arrs]).data
        return float(np.sum(o * proj)) if o.ndim else float(o)

    numeric = finite_difference_grads(objective, arrays, h)
    worst = 0.0
    for t, n in zip(tensors, numeric):
        a = t.grad
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst


def adjoint_gap(op, x, y):
    """|<A x, y> - <x, A^T y>| where A^T y comes from autodiff."""
    xt = T.Tensor(x, requires_grad=True, dtype=np.float64)
    out = op(xt)
    loss = T.tsum(T.mul(out, T.Tensor(y, dtype=np.float64)))
    loss.backward()
    return abs(float(np.sum(out.data * y)) - float(np.sum(x * xt.grad)))


def random_conv_geometry(rng):
    """Random conv settings whose transposed conv maps back onto the input size."""
    k = int(rng.integers(1, 5))
    s = int(rng.integers(1, 4))
    p = int(rng.integers(0, k))
    cin, cout = (int(c) for c in rng.integers(1, 4, size=2))
    ho, wo = (int(v) for v in rng.integers(max(1, 2 * p - k + 2), 6, size=2))
    H, W = (ho - 1) * s + k - 2 * p, (wo - 1) * s + k - 2 * p
    return k, s, p, cin, cout, H, W
