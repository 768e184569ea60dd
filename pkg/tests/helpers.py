"""Shared test fixtures: independent oracles written straight from the
attention equations, and small parameter factories.

The oracles deliberately avoid the package's tape, head-split reshapes,
and stabilised softmax; they spell the math out with explicit loops so a
bug in the implementation cannot hide in its own oracle.
"""

import numpy as np

from ferfuse.attention import CrossFusionMsaParams, MsaParams
from ferfuse.encoder import EncoderParams, StreamBlockParams
from ferfuse.tensor import Tensor


def make_msa_params(dim, heads, rng, scale=0.3, bias=True):
    def w():
        return Tensor(rng.standard_normal((dim, dim)) * scale, requires_grad=True)

    def b():
        return Tensor(rng.standard_normal(dim) * 0.1, requires_grad=True) if bias else None

    return MsaParams(heads=heads, w_q=w(), w_k=w(), w_v=w(), w_o=w(), b_q=b(), b_k=b(), b_v=b(), b_o=b())


def make_cross_params(dim, heads, rng, scale=0.3, bias=True):
    return CrossFusionMsaParams(
        img=make_msa_params(dim, heads, rng, scale, bias),
        lm=make_msa_params(dim, heads, rng, scale, bias),
    )


def make_stream_params(dim, ratio, rng, scale=0.3):
    hidden = ratio * dim
    return StreamBlockParams(
        norm1_gamma=Tensor(np.ones(dim), requires_grad=True),
        norm1_beta=Tensor(np.zeros(dim), requires_grad=True),
        norm2_gamma=Tensor(1.0 + 0.1 * rng.standard_normal(dim), requires_grad=True),
        norm2_beta=Tensor(0.1 * rng.standard_normal(dim), requires_grad=True),
        mlp_w1=Tensor(rng.standard_normal((dim, hidden)) * scale, requires_grad=True),
        mlp_b1=Tensor(0.1 * rng.standard_normal(hidden), requires_grad=True),
        mlp_w2=Tensor(rng.standard_normal((hidden, dim)) * scale, requires_grad=True),
        mlp_b2=Tensor(0.1 * rng.standard_normal(dim), requires_grad=True),
    )


def make_vanilla_block_params(dim, heads, ratio, rng, drop_path_rate=0.0):
    return EncoderParams(
        msa=make_msa_params(dim, heads, rng),
        streams=(make_stream_params(dim, ratio, rng),),
        drop_path_rate=drop_path_rate,
    )


def make_cross_block_params(dim, heads, ratio, rng, drop_path_rate=0.0):
    return EncoderParams(
        msa=make_cross_params(dim, heads, rng),
        streams=(make_stream_params(dim, ratio, rng), make_stream_params(dim, ratio, rng)),
        drop_path_rate=drop_path_rate,
    )


class FakeRng:
    """Plays back a scripted sequence of uniform draws."""

    def __init__(self, values):
        self.values = list(values)

    def random(self):
        return self.values.pop(0)


# ---------------------------------------------------------------------------
# oracles


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def naive_softmax_row(row):
    e = [np.exp(v) for v in row]
    z = sum(e)
    return np.array([v / z for v in e])


def naive_layer_norm_row(row, gamma, beta, eps):
    d = len(row)
    mu = sum(row) / d
    var = sum((v - mu) ** 2 for v in row) / d
    return np.array([gamma[i] * (row[i] - mu) / np.sqrt(var + eps) + beta[i] for i in range(d)])


def _proj(x, w, b):
    out = x @ w
    if b is not None:
        out = out + b
    return out


def oracle_attention(q, k, v, heads):
    """Per-head loops of softmax(Q K^T / sqrt(d)) V, concatenated."""
    p, dim = q.shape
    dh = dim // heads
    out = np.zeros((p, dim))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        scores = np.zeros((p, p))
        for i in range(p):
            for j in range(p):
                scores[i, j] = float(qh[i] @ kh[j]) / np.sqrt(dh)
        for i in range(p):
            weights = naive_softmax_row(scores[i])
            out[i, sl] = sum(weights[j] * vh[j] for j in range(p))
    return out


def oracle_mhsa(x, p: MsaParams):
    q = _proj(x, p.w_q.data, None if p.b_q is None else p.b_q.data)
    k = _proj(x, p.w_k.data, None if p.b_k is None else p.b_k.data)
    v = _proj(x, p.w_v.data, None if p.b_v is None else p.b_v.data)
    att = oracle_attention(q, k, v, p.heads)
    return _proj(att, p.w_o.data, None if p.b_o is None else p.b_o.data)


def oracle_cross_fusion_mhsa(x_img, x_lm, p: CrossFusionMsaParams):
    """Literal query swap: image output scored by landmark queries and
    vice versa, each stream keeping its own keys, values, and output map."""
    q_img = _proj(x_img, p.img.w_q.data, None if p.img.b_q is None else p.img.b_q.data)
    k_img = _proj(x_img, p.img.w_k.data, None if p.img.b_k is None else p.img.b_k.data)
    v_img = _proj(x_img, p.img.w_v.data, None if p.img.b_v is None else p.img.b_v.data)
    q_lm = _proj(x_lm, p.lm.w_q.data, None if p.lm.b_q is None else p.lm.b_q.data)
    k_lm = _proj(x_lm, p.lm.w_k.data, None if p.lm.b_k is None else p.lm.b_k.data)
    v_lm = _proj(x_lm, p.lm.w_v.data, None if p.lm.b_v is None else p.lm.b_v.data)
    out_img = oracle_attention(q_lm, k_img, v_img, p.img.heads)
    out_lm = oracle_attention(q_img, k_lm, v_lm, p.lm.heads)
    return (
        _proj(out_img, p.img.w_o.data, None if p.img.b_o is None else p.img.b_o.data),
        _proj(out_lm, p.lm.w_o.data, None if p.lm.b_o is None else p.lm.b_o.data),
    )


def oracle_gelu(x):
    import math

    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def _oracle_stream_tail(x, attn_out, s: StreamBlockParams, eps):
    x1 = attn_out + x
    normed = np.stack([naive_layer_norm_row(row, s.norm2_gamma.data, s.norm2_beta.data, eps) for row in x1])
    m = oracle_gelu(_proj(normed, s.mlp_w1.data, s.mlp_b1.data))
    m = _proj(m, s.mlp_w2.data, s.mlp_b2.data)
    return m + x1


def oracle_vanilla_block(x, p: EncoderParams, eps):
    """Residual attention then residual MLP over a norm, written literally."""
    return _oracle_stream_tail(x, oracle_mhsa(x, p.msa), p.streams[0], eps)


def oracle_cross_fusion_block(x_img, x_lm, p: EncoderParams, eps):
    a_img, a_lm = oracle_cross_fusion_mhsa(x_img, x_lm, p.msa)
    return (
        _oracle_stream_tail(x_img, a_img, p.streams[0], eps),
        _oracle_stream_tail(x_lm, a_lm, p.streams[-1], eps),
    )
