"""Independent reference computations used by the test suite.

Nothing here imports the library's numerical code paths; each function is a
brute-force restatement of a definition.
"""

import math
from fractions import Fraction

import numpy as np


def triple_loop_matmul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def central_difference(f, arrays, h=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``arrays``.

    ``arrays`` are mutated in place and restored.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f()
            arr[idx] = orig - h
            fm = f()
            arr[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def softmax_mp(row):
    """Softmax of one row in 50-digit precision."""
    import mpmath

    mpmath.mp.dps = 50
    ex = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
    total = mpmath.fsum(ex)
    return [float(e / total) for e in ex]


def lstsq_poly_residual(y, order):
    """Exact rational least-squares polynomial fit on x = 0..N-1."""
    n = len(y)
    ys = [Fraction(v) for v in y]
    size = order + 1
    a = [[Fraction(sum(i ** (r + c) for i in range(n))) for c in range(size)] for r in range(size)]
    rhs = [sum(Fraction(i) ** r * ys[i] for i in range(n)) for r in range(size)]
    # Gauss-Jordan elimination over the rationals
    for col in range(size):
        piv = next(r for r in range(col, size) if a[r][col] != 0)
        a[col], a[piv] = a[piv], a[col]
        rhs[col], rhs[piv] = rhs[piv], rhs[col]
        for r in range(size):
            if r != col and a[r][col] != 0:
                f = a[r][col] / a[col][col]
                a[r] = [x - f * y_ for x, y_ in zip(a[r], a[col])]
                rhs[r] -= f * rhs[col]
    coef = [rhs[r] / a[r][r] for r in range(size)]
    resid = [ys[i] - sum(coef[j] * Fraction(i) ** j for j in range(size)) for i in range(n)]
    return [float(c) for c in coef], [float(r) for r in resid]


def dft_power(frame, n_fft):
    """Power spectrum of a zero-padded frame by the direct DFT sum."""
    x = list(frame) + [0.0] * (n_fft - len(frame))
    out = []
    for k in range(n_fft // 2 + 1):
        re = sum(x[n] * math.cos(2 * math.pi * k * n / n_fft) for n in range(n_fft))
        im = -sum(x[n] * math.sin(2 * math.pi * k * n / n_fft) for n in range(n_fft))
        out.append(re * re + im * im)
    return out


def hamming(n):
    return [0.54 - 0.46 * math.cos(2 * math.pi * i / (n - 1)) for i in range(n)]


def metrics_by_counting(truth, pred, k=5):
    """Every metric computed from raw label pairs by explicit counting."""
    total = len(truth)
    correct = sum(1 for t, p in zip(truth, pred) if t == p)
    per_class = []
    for c in range(k):
        tp = sum(1 for t, p in zip(truth, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(truth, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(truth, pred) if t == c and p != c)
        tn = total - tp - fp - fn
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        spec = tn / (tn + fp) if tn + fp else 0.0
        per_class.append((f1, rec, spec))
    p_o = correct / total
    p_e = sum(
        (sum(1 for t in truth if t == c) / total) * (sum(1 for p in pred if p == c) / total)
        for c in range(k)
    )
    if p_e == 1.0:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1 - p_e)
    return {
        "accuracy": p_o,
        "kappa": kappa,
        "mf1": sum(f for f, _, _ in per_class) / k,
        "mean_sensitivity": sum(r for _, r, _ in per_class) / k,
        "mean_specificity": sum(s for _, _, s in per_class) / k,
        "per_class_f1": [f for f, _, _ in per_class],
    }


def pairs_from_confusion(counts):
    truth, pred = [], []
    for i, row in enumerate(counts):
        for j, c in enumerate(row):
            truth.extend([i] * int(c))
            pred.extend([j] * int(c))
    return truth, pred


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y):
    classes = sorted(set(int(v) for v in train_y))
    cents = {c: train_x[train_y == c].mean(axis=0) for c in classes}
    correct = 0
    for x, y in zip(test_x, test_y):
        best = min(classes, key=lambda c: float(np.sum((x - cents[c]) ** 2)))
        correct += best == y
    return correct / len(test_y)


def threshold_summary_by_filtering(maxprob, correct, threshold):
    """Counts and accuracies for one confidence threshold, by plain loops."""
    above = [(p, c) for p, c in zip(maxprob, correct) if p > threshold]
    below = [(p, c) for p, c in zip(maxprob, correct) if not p > threshold]
    return {
        "count_above": len(above),
        "fraction_above": len(above) / len(maxprob),
        "accuracy_above": sum(c for _, c in above) / len(above) if above else None,
        "accuracy_below": sum(c for _, c in below) / len(below) if below else None,
        "min": min(p for p, _ in above) if above else None,
        "max": max(p for p, _ in above) if above else None,
        "mean": sum(p for p, _ in above) / len(above) if above else None,
    }


def linear_quantile(values, q):
    """Quantile with linear interpolation between closest ranks."""
    v = sorted(values)
    pos = q * (len(v) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def fill_by_interpolation(values):
    """Gap filling in exact rational arithmetic: linear between known
    neighbours, copy of the nearest known value past either end."""
    known = [i for i, v in enumerate(values) if v is not None]
    out = []
    for i, v in enumerate(values):
        if v is not None:
            out.append(float(v))
            continue
        left = [k for k in known if k < i]
        right = [k for k in known if k > i]
        if not left:
            out.append(float(values[right[0]]))
        elif not right:
            out.append(float(values[left[-1]]))
        else:
            a, b = left[-1], right[0]
            va, vb = Fraction(values[a]), Fraction(values[b])
            out.append(float(va + (vb - va) * Fraction(i - a, b - a)))
    return out
