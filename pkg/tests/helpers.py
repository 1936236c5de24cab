"""Shared test oracles: finite differences, relative error, slow reference math.

Everything here is deliberately independent of the package internals —
plain loops and library calls only — so tests compare two separate routes
to the same numbers.
"""

import numpy as np


def rel_err(a, b, floor: float = 1e-6) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f() w.r.t. array x.

    x is perturbed in place and restored; f must read the current contents
    of x on every call.
    """
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product via explicit scalar loops."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def mha_oracle(x_q, x_kv, p) -> np.ndarray:
    """Straight-line per-head attention reference: slice, attend, concat,
    project. Reads parameter arrays only; all math is plain numpy."""
    import math

    wq, wk, wv, wo = p.w_q.data, p.w_k.data, p.w_v.data, p.w_o.data
    h = p.n_heads
    d = wq.shape[0]
    dh = d // h
    q, k, v = x_q @ wq, x_kv @ wk, x_kv @ wv
    outs = []
    for i in range(h):
        qs = q[:, i * dh:(i + 1) * dh]
        ks = k[:, i * dh:(i + 1) * dh]
        vs = v[:, i * dh:(i + 1) * dh]
        s = qs @ ks.T / math.sqrt(dh)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        outs.append(a @ vs)
    return np.concatenate(outs, axis=1) @ wo


def ln_oracle(x, g, b, eps=1e-8):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def encoder_block_oracle(x, p) -> np.ndarray:
    x1 = ln_oracle(x + mha_oracle(x, x, p.attn), p.ln1_g.data, p.ln1_b.data)
    hid = np.maximum(x1 @ p.ffn_w1.data + p.ffn_b1.data, 0.0)
    ff = hid @ p.ffn_w2.data + p.ffn_b2.data
    return ln_oracle(x1 + ff, p.ln2_g.data, p.ln2_b.data)


def fusion_block_oracle(text_x, audio_mem, p) -> np.ndarray:
    x1 = ln_oracle(text_x + mha_oracle(text_x, text_x, p.self_attn),
                   p.ln1_g.data, p.ln1_b.data)
    x2 = ln_oracle(x1 + mha_oracle(x1, audio_mem, p.cross_attn),
                   p.ln2_g.data, p.ln2_b.data)
    hid = np.maximum(x2 @ p.ffn_w1.data + p.ffn_b1.data, 0.0)
    ff = hid @ p.ffn_w2.data + p.ffn_b2.data
    return ln_oracle(x2 + ff, p.ln3_g.data, p.ln3_b.data)


def highprec_softmax(row) -> np.ndarray:
    """Softmax of one row evaluated at 50 significant digits via mpmath."""
    from mpmath import mp, mpf, exp

    mp.dps = 50
    vals = [mpf(repr(float(v))) for v in row]
    mx = max(vals)
    es = [exp(v - mx) for v in vals]
    total = sum(es)
    return np.array([float(e / total) for e in es], dtype=np.float64)
