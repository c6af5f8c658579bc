"""Independent oracles shared by the test suite.

Everything here is deliberately written from the mathematical
definitions (nested loops, direct formulas) and never calls the
implementation paths it is used to check.
"""

from __future__ import annotations

import numpy as np

from mmfusion.tensor import Tensor


def naive_conv2d(x, w, b=None, stride=(1, 1), padding=(0, 0)):
    """Direct nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    assert ci == c
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for oi in range(co):
            for yi in range(oh):
                for xi in range(ow):
                    patch = xp[ni, :, yi * sh:yi * sh + kh, xi * sw:xi * sw + kw]
                    out[ni, oi, yi, xi] = np.sum(patch * w[oi])
            if b is not None:
                out[ni, oi] += b[oi]
    return out


def naive_conv3d(x, w, b=None, stride=(1, 1, 1), padding=(0, 0, 0)):
    n, c, d, h, wd = x.shape
    co, ci, kd, kh, kw = w.shape
    assert ci == c
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    od = (d + 2 * pd - kd) // sd + 1
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, co, od, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for oi in range(co):
            for zi in range(od):
                for yi in range(oh):
                    for xi in range(ow):
                        patch = xp[ni, :, zi * sd:zi * sd + kd,
                                   yi * sh:yi * sh + kh, xi * sw:xi * sw + kw]
                        out[ni, oi, zi, yi, xi] = np.sum(patch * w[oi])
            if b is not None:
                out[ni, oi] += b[oi]
    return out


def finite_diff(loss_fn, arrays, h=1e-4):
    """Central finite differences of a scalar function of numpy arrays.

    ``loss_fn`` is re-evaluated with each element of each array nudged
    by +-h in place; arrays are restored afterwards.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn()
            flat[i] = orig - h
            lm = loss_fn()
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def check_op_gradients(op_fn, inputs, rng, *, h=1e-4, rtol=1e-4, atol=1e-6):
    """Compare analytic gradients of ``op_fn(*inputs)`` to finite differences.

    inputs are float64 Tensors with requires_grad set. The scalar loss
    is a fixed random projection of the output, which exercises every
    output element with distinct weights.
    """
    out = op_fn(*inputs)
    proj = rng.standard_normal(out.shape)

    def loss_value():
        return float((op_fn(*inputs).data * proj).sum())

    scalar = (out * Tensor(proj.astype(out.dtype))).sum()
    scalar.backward()

    arrays = [t.data for t in inputs]
    numeric = finite_diff(loss_value, arrays, h=h)
    for t, num in zip(inputs, numeric):
        ana = t.grad
        assert ana is not None, "missing analytic gradient"
        err = np.abs(ana - num)
        bound = rtol * np.maximum(np.abs(ana), np.abs(num)) + atol
        assert (err <= bound).all(), (
            f"gradient mismatch: max err {err.max():.3e}, "
            f"worst bound {bound[err > bound].min():.3e}")


def direct_kappa(y_true, y_pred, k):
    """Cohen's kappa straight from the counting definition."""
    n = len(y_true)
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(y_true, y_pred):
        cm[t][p] += 1
    p_o = sum(cm[i][i] for i in range(k)) / n
    p_e = sum((sum(cm[i]) / n) * (sum(cm[j][i] for j in range(k)) / n) for i in range(k))
    if abs(1.0 - p_e) < 1e-15:
        return 1.0 if p_o >= 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def pairwise_auc(y_true, scores):
    """AUC by brute-force enumeration of (positive, negative) pairs."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[y_true == 1]
    neg = scores[y_true == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def trapezoid_auc(y_true, scores):
    """AUC by trapezoidal integration of a threshold-swept ROC curve."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = float((y_true == 1).sum())
    n_neg = float((y_true == 0).sum())
    points = [(0.0, 0.0)]
    for thr in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= thr
        tpr = float((pred & (y_true == 1)).sum()) / n_pos
        fpr = float((pred & (y_true == 0)).sum()) / n_neg
        points.append((fpr, tpr))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def counted_sens_spec(y_true, scores, threshold):
    tp = fn = tn = fp = 0
    for label, score in zip(y_true, scores):
        positive = score >= threshold
        if label == 1 and positive:
            tp += 1
        elif label == 1:
            fn += 1
        elif positive:
            fp += 1
        else:
            tn += 1
    return tp / (tp + fn), tn / (tn + fp)


def reference_adam(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999,
                   eps=1e-8, weight_decay=0.0):
    """One textbook Adam step with coupled L2 decay; returns new values.

    state is (m_list, v_list, t); everything float64.
    """
    m_list, v_list, t = state
    t = t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, m_list, v_list):
        g = g + weight_decay * p
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, (new_m, new_v, t)
