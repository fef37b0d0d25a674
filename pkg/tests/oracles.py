"""Independent reference implementations used as test oracles.

Everything here is written as plain float64 numpy/loops with no reuse of
the package's own kernels, so agreement between the two routes is
meaningful. Keep these slow and obvious.
"""

from __future__ import annotations

import math

import numpy as np


def finite_difference_grads(loss_fn, arrays, h=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. each array in place.

    ``loss_fn`` takes no arguments and reads the (mutated) arrays; returns
    a list of gradient arrays matching ``arrays``.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(loss_fn())
            flat[i] = old - h
            fm = float(loss_fn())
            flat[i] = old
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-4):
    """Worst elementwise relative error between two arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def sigmoid_scalar(x):
    return 1.0 / (1.0 + math.exp(-x))


def gelu_scalar(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def swish_scalar(x):
    return x * sigmoid_scalar(x)


def layer_norm_rows(x, gamma, beta, eps=1e-5):
    """Row-at-a-time layer norm over the last axis, float64 loops."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1, x.shape[-1])
    oflat = out.reshape(-1, x.shape[-1])
    for r in range(flat.shape[0]):
        row = flat[r]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        inv = 1.0 / math.sqrt(var + eps)
        for j in range(len(row)):
            oflat[r, j] = (row[j] - mu) * inv * gamma[j] + beta[j]
    return out


def mixer_block_rows(x, gamma, beta, w1, b1, w2, b2, act="gelu", eps=1e-5):
    """Residual MLP mixing of the last axis, straight-line float64.

    out = x + act(LN(x) @ w1 + b1) @ w2 + b2, all loops.
    """
    x = np.asarray(x, dtype=np.float64)
    normed = layer_norm_rows(x, gamma, beta, eps)
    act_fn = {"gelu": gelu_scalar, "swish": swish_scalar}[act]
    flat = normed.reshape(-1, x.shape[-1])
    xflat = x.reshape(-1, x.shape[-1])
    out = np.zeros_like(xflat)
    hidden_dim = w1.shape[1]
    for r in range(flat.shape[0]):
        hidden = [0.0] * hidden_dim
        for j in range(hidden_dim):
            s = b1[j]
            for i in range(flat.shape[1]):
                s += flat[r, i] * w1[i, j]
            hidden[j] = act_fn(s)
        for j in range(flat.shape[1]):
            s = b2[j]
            for i in range(hidden_dim):
                s += hidden[i] * w2[i, j]
            out[r, j] = xflat[r, j] + s
    return out.reshape(x.shape)


def fusion_rows(x, y_behav, y_feat, wg, bg):
    """Gated blend z = a*y_behav + (1-a)*y_feat with a = sigmoid(x @ wg + bg)
    computed per position from the layer input x."""
    x = np.asarray(x, dtype=np.float64)
    y_behav = np.asarray(y_behav, dtype=np.float64)
    y_feat = np.asarray(y_feat, dtype=np.float64)
    flat_x = x.reshape(-1, x.shape[-1])
    flat_b = y_behav.reshape(-1, y_behav.shape[-1])
    flat_f = y_feat.reshape(-1, y_feat.shape[-1])
    out = np.zeros_like(flat_b)
    for r in range(flat_b.shape[0]):
        s = bg[0]
        for i in range(flat_x.shape[1]):
            s += flat_x[r, i] * wg[i, 0]
        a = sigmoid_scalar(s)
        for j in range(flat_b.shape[1]):
            out[r, j] = a * flat_b[r, j] + (1.0 - a) * flat_f[r, j]
    return out.reshape(y_behav.shape)


def conv1d_loops(x, kernels, stride=1, padding=0):
    """Plain loop 1-D convolution; x is (L, C), kernels (K, C, C_out)."""
    x = np.asarray(x, dtype=np.float64)
    k, c_in, c_out = kernels.shape
    length = x.shape[0]
    xp = np.zeros((length + 2 * padding, c_in))
    xp[padding : padding + length] = x
    out_len = (length + 2 * padding - k) // stride + 1
    out = np.zeros((out_len, c_out))
    for o in range(out_len):
        start = o * stride
        for co in range(c_out):
            s = 0.0
            for tap in range(k):
                for ci in range(c_in):
                    s += xp[start + tap, ci] * kernels[tap, ci, co]
            out[o, co] = s
    return out


def pool_project_score_rows(scales, masks, proj_w, proj_b, item_table):
    """Straight-line scoring head: masked mean-pool each scale, concatenate,
    linear projection, then dot products against every item row.

    ``scales``: list of (B, L_s, D) arrays; ``masks``: matching (B, L_s)
    boolean arrays. Returns (B, V) scores in float64.
    """
    bsz = scales[0].shape[0]
    dim = scales[0].shape[2]
    pooled = []
    for b in range(bsz):
        parts = []
        for z, m in zip(scales, masks):
            acc = [0.0] * dim
            count = 0
            for pos in range(z.shape[1]):
                if m[b, pos]:
                    count += 1
                    for j in range(dim):
                        acc[j] += float(z[b, pos, j])
            if count > 0:
                acc = [v / count for v in acc]
            parts.extend(acc)
        pooled.append(parts)
    n_items, d_item = item_table.shape
    scores = np.zeros((bsz, n_items))
    for b in range(bsz):
        proj = [0.0] * d_item
        for j in range(d_item):
            s = float(proj_b[j])
            for i in range(len(pooled[b])):
                s += pooled[b][i] * float(proj_w[i, j])
            proj[j] = s
        for v in range(n_items):
            s = 0.0
            for j in range(d_item):
                s += proj[j] * float(item_table[v, j])
            scores[b, v] = s
    return scores


def softmax_ce_loops(logits, targets, row_mask=None):
    """Mean masked cross-entropy, one row at a time in float64."""
    logits = np.asarray(logits, dtype=np.float64)
    bsz = logits.shape[0]
    mask = [True] * bsz if row_mask is None else list(row_mask)
    total = 0.0
    n = 0
    for r in range(bsz):
        if not mask[r]:
            continue
        row = logits[r]
        m = max(row)
        denom = sum(math.exp(v - m) for v in row)
        total += -(row[targets[r]] - m - math.log(denom))
        n += 1
    return total / n


def ranking_metrics_loops(scores, target, k):
    """Rank of ``target`` among ``scores`` (1-based, ties to lower index wins
    earlier rank for the earlier index) and the HR/NDCG/MRR@k triple."""
    scores = np.asarray(scores, dtype=np.float64)
    t = scores[target]
    rank = 1
    for j in range(scores.shape[0]):
        if scores[j] > t or (scores[j] == t and j < target):
            rank += 1
    hr = 1.0 if rank <= k else 0.0
    ndcg = 1.0 / math.log2(rank + 1.0) if rank <= k else 0.0
    mrr = 1.0 / rank if rank <= k else 0.0
    return rank, hr, ndcg, mrr


def adam_step_loops(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One Adam update in float64 loops; returns (new_param, new_m, new_v)."""
    p = np.asarray(param, dtype=np.float64).reshape(-1).copy()
    g = np.asarray(grad, dtype=np.float64).reshape(-1).copy()
    m = np.asarray(m, dtype=np.float64).reshape(-1).copy()
    v = np.asarray(v, dtype=np.float64).reshape(-1).copy()
    for i in range(p.size):
        gi = g[i] + weight_decay * p[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        mhat = m[i] / (1.0 - beta1**t)
        vhat = v[i] / (1.0 - beta2**t)
        p[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    shape = np.asarray(param).shape
    return p.reshape(shape), m.reshape(shape), v.reshape(shape)
