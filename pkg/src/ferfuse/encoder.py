"""Transformer encoder blocks, drop-path, and two-stream stacks.

Block topology, in both the fused and cross-fusion forms:

    x'  = drop_path(attention(x)) + x
    out = drop_path(mlp(norm(x'))) + x'

i.e. the attention branch runs on the raw input with no preceding
normalisation; the only norm sits in front of the MLP. A ``pre_msa_norm``
flag turns on a conventional pre-attention norm for experiments; its
gamma/beta are allocated either way so parameter layouts do not depend on
the flag.

A two-stream stack applies cross-fusion (query-swapped) blocks for the
first ``swap_depth`` blocks and per-stream self-attention for the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

from .attention import (
    AttentionTrace,
    CrossFusionMsaParams,
    MsaParams,
    cross_fusion_mhsa,
    mhsa,
)
from .tensor import Tensor, add, gelu, layer_norm, linear, scale

LN_EPS = 1e-5


@dataclass
class StreamBlockParams:
    """Norm and MLP parameters owned by one stream of one block."""

    norm1_gamma: Tensor  # pre-attention site, inert unless pre_msa_norm
    norm1_beta: Tensor
    norm2_gamma: Tensor  # pre-MLP site
    norm2_beta: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor


@dataclass
class EncoderParams:
    """One encoder block: attention weights plus per-stream norm/MLP.

    ``streams`` has one entry for fused/single-stream blocks and for
    two-stream blocks with shared unswapped weights, two entries for
    ordinary two-stream blocks.
    """

    msa: MsaParams | CrossFusionMsaParams
    streams: tuple
    drop_path_rate: float = 0.0


@dataclass
class StackParams:
    """An ordered run of encoder blocks with a query-swap prefix length."""

    blocks: list
    swap_depth: int

    def __post_init__(self):
        if not 0 <= self.swap_depth <= len(self.blocks):
            raise ValueError(
                f"swap_depth {self.swap_depth} out of range for {len(self.blocks)} blocks"
            )


def drop_path(branch: Tensor, rate: float, training: bool, rng=None) -> Tensor:
    """Stochastic depth on a residual branch.

    In eval mode, or at rate 0, the branch passes through untouched. In
    training mode the whole branch is zeroed with probability ``rate`` and
    scaled by 1/(1-rate) otherwise, keeping the expectation equal to the
    branch itself. One Bernoulli draw per call, so a batched branch is
    kept or dropped as a unit.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop_path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return branch
    if rng is None:
        raise ValueError("drop_path needs an rng in training mode with rate > 0")
    if rng.random() < rate:
        return scale(branch, 0.0)
    return scale(branch, 1.0 / (1.0 - rate))


def _mlp(x: Tensor, s: StreamBlockParams) -> Tensor:
    return linear(gelu(linear(x, s.mlp_w1, s.mlp_b1)), s.mlp_w2, s.mlp_b2)


def _residual_tail(x: Tensor, attn_out: Tensor, s: StreamBlockParams, rate, training, rng) -> Tensor:
    x1 = add(drop_path(attn_out, rate, training, rng), x)
    m = _mlp(layer_norm(x1, s.norm2_gamma, s.norm2_beta, LN_EPS), s)
    return add(drop_path(m, rate, training, rng), x1)


def vanilla_block(
    x: Tensor,
    p: EncoderParams,
    training: bool,
    rng=None,
    pre_msa_norm: bool = False,
    attn_sink: list | None = None,
) -> Tensor:
    """Self-attention encoder block on one token matrix (fused or single stream)."""
    s = p.streams[0]
    h = layer_norm(x, s.norm1_gamma, s.norm1_beta, LN_EPS) if pre_msa_norm else x
    a = mhsa(h, p.msa, attn_sink)
    return _residual_tail(x, a, s, p.drop_path_rate, training, rng)


def cross_fusion_block(
    x_img: Tensor,
    x_lm: Tensor,
    p: EncoderParams,
    training: bool,
    rng=None,
    swapped: bool = True,
    pre_msa_norm: bool = False,
    attn_sink_img: list | None = None,
    attn_sink_lm: list | None = None,
) -> tuple[Tensor, Tensor]:
    """Two-stream encoder block.

    With ``swapped`` the attention queries are exchanged between streams;
    without it each stream self-attends with its own weights. Residual and
    MLP structure is identical either way, with independent per-stream
    parameters (or a single shared set when ``p.streams`` has one entry).
    """
    msa_p: CrossFusionMsaParams = p.msa
    s_img = p.streams[0]
    s_lm = p.streams[-1]
    h_img = layer_norm(x_img, s_img.norm1_gamma, s_img.norm1_beta, LN_EPS) if pre_msa_norm else x_img
    h_lm = layer_norm(x_lm, s_lm.norm1_gamma, s_lm.norm1_beta, LN_EPS) if pre_msa_norm else x_lm
    if swapped:
        a_img, a_lm = cross_fusion_mhsa(h_img, h_lm, msa_p, attn_sink_img, attn_sink_lm)
    else:
        a_img = mhsa(h_img, msa_p.img, attn_sink_img)
        a_lm = mhsa(h_lm, msa_p.lm, attn_sink_lm)
    out_img = _residual_tail(x_img, a_img, s_img, p.drop_path_rate, training, rng)
    out_lm = _residual_tail(x_lm, a_lm, s_lm, p.drop_path_rate, training, rng)
    return out_img, out_lm


def stack_forward(
    x_img: Tensor,
    x_lm: Tensor,
    s: StackParams,
    training: bool,
    rng=None,
    pre_msa_norm: bool = False,
    trace: AttentionTrace | None = None,
    level: int = 0,
) -> tuple[Tensor, Tensor]:
    """Run a two-stream stack: cross-fusion for the first ``swap_depth``
    blocks, per-stream self-attention after that."""
    for i, block in enumerate(s.blocks):
        sink_img: list | None = [] if trace is not None else None
        sink_lm: list | None = [] if trace is not None else None
        x_img, x_lm = cross_fusion_block(
            x_img,
            x_lm,
            block,
            training,
            rng,
            swapped=i < s.swap_depth,
            pre_msa_norm=pre_msa_norm,
            attn_sink_img=sink_img,
            attn_sink_lm=sink_lm,
        )
        if trace is not None:
            for w in sink_img:
                trace.add(level, i, "img", w)
            for w in sink_lm:
                trace.add(level, i, "lm", w)
    return x_img, x_lm


def fused_stack_forward(
    x: Tensor,
    blocks: list,
    training: bool,
    rng=None,
    pre_msa_norm: bool = False,
    trace: AttentionTrace | None = None,
    level: int = 0,
) -> Tensor:
    """Run a plain self-attention stack on one token matrix."""
    for i, block in enumerate(blocks):
        sink: list | None = [] if trace is not None else None
        x = vanilla_block(x, block, training, rng, pre_msa_norm=pre_msa_norm, attn_sink=sink)
        if trace is not None:
            for w in sink:
                trace.add(level, i, "fused", w)
    return x
