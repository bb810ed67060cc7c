"""Independent naive-loop reference implementations used as test oracles.

Everything here is deliberately written with explicit Python loops and
math-module scalars, sharing no code with the package's vectorized paths.
"""

import math

import numpy as np


def naive_similarity_matrix(features):
    """Cosine similarities with explicit loops. features: [N,d] for one sample."""
    n = len(features)
    out = np.zeros((n, n), dtype=np.float64)
    for j in range(n):
        for k in range(n):
            nj = math.sqrt(sum(float(x) * float(x) for x in features[j]))
            nk = math.sqrt(sum(float(x) * float(x) for x in features[k]))
            if nj == 0.0 or nk == 0.0:
                out[j, k] = 0.0
            else:
                dot = sum(float(a) * float(b) for a, b in zip(features[j], features[k]))
                out[j, k] = dot / (nj * nk)
    return out


def naive_similarity_loss(per_layer_features):
    """-(1/L) sum_l (1/N^2) sum_jk M_jk, averaged over the batch.

    per_layer_features: list over layers of [B,N,d] arrays.
    """
    num_layers = len(per_layer_features)
    batch = per_layer_features[0].shape[0]
    total = 0.0
    for sample in range(batch):
        acc = 0.0
        for feats in per_layer_features:
            m = naive_similarity_matrix(feats[sample])
            n = m.shape[0]
            acc += m.sum() / (n * n)
        total += -acc / num_layers
    return total / batch


def naive_attention(q, k, v, n_heads):
    """Three-loop multi-head attention for one sample. q,k,v: [T,d]."""
    t, d = q.shape
    dh = d // n_heads
    out = np.zeros((t, d), dtype=np.float64)
    for h in range(n_heads):
        qs = q[:, h * dh:(h + 1) * dh]
        ks = k[:, h * dh:(h + 1) * dh]
        vs = v[:, h * dh:(h + 1) * dh]
        for i in range(t):
            scores = []
            for j in range(t):
                scores.append(sum(float(a) * float(b) for a, b in zip(qs[i], ks[j]))
                              / math.sqrt(dh))
            mx = max(scores)
            weights = [math.exp(s - mx) for s in scores]
            z = sum(weights)
            weights = [w / z for w in weights]
            for j in range(t):
                for c in range(dh):
                    out[i, h * dh + c] += weights[j] * float(vs[j, c])
    return out


def naive_entropy(probs):
    """Row entropies in nats with 0*ln(0) := 0. probs: [B,C]."""
    out = []
    for row in probs:
        e = 0.0
        for p in row:
            p = float(p)
            if p > 0.0:
                e -= p * math.log(p)
        out.append(e)
    return np.array(out, dtype=np.float64)


def naive_mask_fraction(mask):
    """Balance parameter: count of kept samples over batch size."""
    count = 0
    for m in mask:
        if m:
            count += 1
    return count / len(mask)


def central_difference(fn, x, eps=1e-6):
    """Scalar central difference for standalone sanity checks."""
    return (fn(x + eps) - fn(x - eps)) / (2 * eps)
