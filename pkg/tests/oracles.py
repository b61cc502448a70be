"""Independent reference computations used by the tests."""

import itertools

import numpy as np


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), floor))


def conv_reference(params, image):
    """Loop-nest forward pass of a same-padded conv stack (no vectorization)."""
    x = np.asarray(image, dtype=np.float64) - 0.5
    h, w, _ = x.shape
    for layer in params.layers:
        k = layer.weight.shape[0]
        p = k // 2
        c_in, c_out = layer.weight.shape[2], layer.weight.shape[3]
        out = np.zeros((h, w, c_out))
        for r in range(h):
            for c in range(w):
                for o in range(c_out):
                    s = layer.bias[o]
                    for dr in range(k):
                        for dc in range(k):
                            rr, cc = r + dr - p, c + dc - p
                            if 0 <= rr < h and 0 <= cc < w:
                                for i in range(c_in):
                                    s += x[rr, cc, i] * layer.weight[dr, dc, i, o]
                    out[r, c, o] = s
        x = np.maximum(out, 0.0) if layer.activation == "relu" else out
    return x


def brute_force_min_miou(tp, fp, fn):
    """Exhaustive minimum of dataset mIoU over all per-image attack choices.

    Every assignment is scored at once; ties keep the first assignment in
    lexicographic order.
    """
    tp, fp, fn = (np.asarray(a, dtype=np.float64) for a in (tp, fp, fn))
    n_img, n_att, _ = tp.shape
    choices = np.array(list(itertools.product(range(n_att), repeat=n_img))).reshape(-1, n_img)
    rows = np.arange(n_img)
    agg = [a[rows, choices].sum(1) for a in (tp, fp, fn)]  # (n_choices, K)
    union = agg[0] + agg[1] + agg[2]
    valid = union > 0
    iou = np.divide(agg[0], union, out=np.zeros_like(union), where=valid)
    values = iou.sum(1) / valid.sum(1)
    k = int(np.argmin(values))
    return float(values[k]), choices[k]
