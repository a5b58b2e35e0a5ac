"""Independent reference computations used by the tests.

Nothing here imports the code under test.
"""

import numpy as np

FD_STEP = 1e-3
SKIP_BELOW = 1e-6


def naive_conv2d(x, w, b):
    """Six nested loops, float64, valid padding, stride 1."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    oh, ow = h - k + 1, wd - k + 1
    out = np.zeros((n, o, oh, ow))
    for i in range(n):
        for f in range(o):
            for r in range(oh):
                for s in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for p in range(k):
                            for q in range(k):
                                acc += float(x[i, ch, r + p, s + q]) * float(w[f, ch, p, q])
                    out[i, f, r, s] = acc + float(b[f])
    return out


def numeric_grad(f, x, step=FD_STEP):
    """Central differences of the scalar ``f()`` w.r.t. every element of ``x`` (in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx].copy()
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def max_rel_error(analytic, numeric, skip_below=SKIP_BELOW):
    """Largest |a - n| / max(|a|, |n|) over elements with |a| + |n| >= skip_below."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = (np.abs(a) + np.abs(n)) >= skip_below
    if not keep.any():
        return 0.0
    a, n = a[keep], n[keep]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))


def tensor_rel_error(analytic, numeric):
    """||a - n|| / max(||a||, ||n||) over a whole parameter tensor."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)


def pair_count_auc(scores, labels):
    """Mann-Whitney estimate: fraction of (pos, neg) pairs ordered correctly, ties = 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for p in pos:
        wins += np.sum(p > neg) + 0.5 * np.sum(p == neg)
    return wins / (len(pos) * len(neg))


def table1_parameter_count(in_channels, classes=38):
    """Closed-form count for the default 7-conv plan: conv weights+bias, bn gamma+beta, dense."""
    filters = [32, 32, 64, 64, 128, 128, 256]
    trainable = 0
    running = 0
    c = in_channels
    for f in filters:
        trainable += 3 * 3 * c * f + f
        trainable += 2 * f
        running += 2 * f
        c = f
    trainable += c * classes + classes
    return trainable, trainable + running
