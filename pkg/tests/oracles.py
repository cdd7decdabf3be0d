"""Independent float64 reference implementations used as test oracles."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_naive(x, w, b, stride=1, pad=0):
    """Six nested loops, straight from the definition of cross-correlation."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for r in range(ho):
                for q in range(wo):
                    acc = float(b[oc])
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ic, r * stride + u, q * stride + v] * w[oc, ic, u, v]
                    out[i, oc, r, q] = acc
    return out


def conv2d_ref(x, w, b, stride=1, pad=0):
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, w.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwuv,ocuv->nohw", win, w, optimize=True) + b[None, :, None, None]


def maxpool_ref(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2).max(axis=(3, 5))


class ReferenceModel:
    """Float64 forward of the CNN regressor with per-stage input caching."""

    def __init__(self, config, tensors):
        self.config = config
        self.p = {k: np.asarray(v, dtype=np.float64).copy() for k, v in tensors.items()}

    def stages(self):
        names = [f"conv{k}" for k in range(len(self.config.conv_blocks))]
        names += [f"dense{k}" for k in range(len(self.config.dense))]
        return names + ["out"]

    def run_stage(self, name, h):
        p = self.p
        if name.startswith("conv"):
            k = int(name[4:])
            blk = self.config.conv_blocks[k]
            h = conv2d_ref(h, p[f"{name}.weight"], p[f"{name}.bias"], blk.stride, blk.padding)
            h = maxpool_ref(np.maximum(h, 0.0))
            if k == len(self.config.conv_blocks) - 1:
                h = h.mean(axis=(2, 3))
            return h
        if name.startswith("dense"):
            return np.maximum(h @ p[f"{name}.weight"].T + p[f"{name}.bias"], 0.0)
        half, mid = self.config.output_scale
        return mid + half * (h @ p["out.weight"].T + p["out.bias"])[:, 0]

    def stage_inputs(self, x):
        h = np.asarray(x, dtype=np.float64)
        cache = {}
        for name in self.stages():
            cache[name] = h
            h = self.run_stage(name, h)
        return cache, h

    def predict_from(self, name, h):
        stages = self.stages()
        for s in stages[stages.index(name):]:
            h = self.run_stage(s, h)
        return h


def mse(pred, y):
    return float(np.mean((pred - y) ** 2))


def numeric_grads(config, tensors, x, y, eps=1e-5):
    """Central differences of the float64 MSE for every parameter entry."""
    ref = ReferenceModel(config, tensors)
    cache, _ = ref.stage_inputs(x)
    out = {}
    for name in tensors:
        stage = name.split(".")[0]
        arr = ref.p[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = mse(ref.predict_from(stage, cache[stage]), y)
            flat[k] = old - eps
            down = mse(ref.predict_from(stage, cache[stage]), y)
            flat[k] = old
            gflat[k] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_errors(analytic, numeric, floor=1e-8):
    """|a - n| / max(|a|, |n|); entries where both are below ``floor`` count as exact."""
    errs = []
    for k in analytic:
        a = np.asarray(analytic[k], dtype=np.float64).ravel()
        n = np.asarray(numeric[k], dtype=np.float64).ravel()
        den = np.maximum(np.abs(a), np.abs(n))
        e = np.where(den < floor, 0.0, np.abs(a - n) / np.where(den < floor, 1.0, den))
        errs.append(e)
    return np.concatenate(errs)


def ecdf_kde_integral(x, y):
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2.0)
