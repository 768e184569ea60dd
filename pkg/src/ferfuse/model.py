"""Model assembly: pyramid projections, the six architecture variants,
parameter registration, and analytic parameter/FLOP accounting.

Variants:

    landmark_only / image_only   one stream -> self-attention stack -> head
    baseline                     patch-concat both streams -> one stack -> head
    baseline_pyramid             patch-concat -> one stack per pyramid level
    baseline_crossfusion         two streams, single level, query-swap stack
    poster                       two streams, query-swap stack per pyramid level

Every learnable tensor is registered under a hierarchical dotted name
(level0.block1.img.attn.w_q, head.w2, ...); the name -> shape map is stable
across runs for a fixed config and is the checkpoint addressing scheme.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, fields

import numpy as np

from .attention import AttentionTrace, CrossFusionMsaParams, MsaParams
from .encoder import (
    EncoderParams,
    StackParams,
    StreamBlockParams,
    fused_stack_forward,
    stack_forward,
)
from .tensor import Tensor, concat, concat_patches, gelu, linear, mean_pool_patches

VARIANTS = (
    "landmark_only",
    "image_only",
    "baseline",
    "baseline_pyramid",
    "baseline_crossfusion",
    "poster",
)
TWO_STREAM_VARIANTS = ("baseline_crossfusion", "poster")
FUSED_VARIANTS = ("baseline", "baseline_pyramid")
SINGLE_VARIANTS = ("landmark_only", "image_only")
PYRAMID_VARIANTS = ("baseline_pyramid", "poster")


@dataclass
class ModelConfig:
    """Every architectural knob in one place.

    ``pyramid_dims`` only takes effect for the pyramid variants; the rest
    run a single level at ``base_dim``. Heads per level follow
    max(1, dim // heads_divisor), so the defaults give 8/4/2 heads at
    512/256/128. ``swap_depth=None`` means swap queries in every block.
    """

    patches: int = 68
    base_dim: int = 512
    pyramid_dims: tuple = (512, 256, 128)
    depth: int = 8
    mlp_ratio: int = 2
    drop_path: float = 0.01
    heads_divisor: int = 64
    swap_depth: int | None = None
    num_classes: int = 7
    variant: str = "poster"
    label_smoothing: float = 0.1
    qkv_bias: bool = True
    pre_msa_norm: bool = False
    share_unswapped: bool = False
    head_hidden: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.pyramid_dims = tuple(int(d) for d in self.pyramid_dims)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.patches < 1 or self.base_dim < 1 or self.depth < 0:
            raise ValueError("patches/base_dim must be >= 1 and depth >= 0")
        if self.mlp_ratio < 1:
            raise ValueError(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ValueError(f"drop_path must be in [0, 1), got {self.drop_path}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if any(d < 1 for d in self.pyramid_dims) or any(
            a <= b for a, b in zip(self.pyramid_dims, self.pyramid_dims[1:])
        ):
            raise ValueError(f"pyramid_dims must be strictly decreasing, got {self.pyramid_dims}")
        if self.swap_depth is not None and not 0 <= self.swap_depth <= self.depth:
            raise ValueError(f"swap_depth {self.swap_depth} out of range [0, {self.depth}]")
        for d in self.level_dims():
            if d % self.heads_for(d) != 0:
                raise ValueError(f"dim {d} not divisible by its head count {self.heads_for(d)}")

    def heads_for(self, dim: int) -> int:
        return max(1, dim // self.heads_divisor)

    def level_dims(self) -> tuple:
        if self.variant in PYRAMID_VARIANTS:
            return self.pyramid_dims
        return (self.base_dim,)

    def effective_swap_depth(self) -> int:
        return self.depth if self.swap_depth is None else self.swap_depth

    def feature_dim(self) -> int:
        per = 2 if self.variant in TWO_STREAM_VARIANTS else 1
        return per * sum(self.level_dims())

    def head_hidden_dim(self) -> int:
        if self.head_hidden is not None:
            return self.head_hidden
        return max(self.num_classes, self.feature_dim() // 2)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["pyramid_dims"] = list(self.pyramid_dims)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class LevelParams:
    dim: int
    stack: StackParams
    proj_img: LinearParams | None = None
    proj_lm: LinearParams | None = None
    proj: LinearParams | None = None  # fused / single-stream variants


@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ModelParams:
    levels: list
    head: HeadParams
    named: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def scalar_count(self) -> int:
        return sum(t.size for t in self.named.values())


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, clip: float = 2.0) -> np.ndarray:
    """Normal samples rejected outside +-clip sigma, then scaled by std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > clip
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > clip
    return out * std


class _Registry:
    def __init__(self):
        self.named: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, arr: np.ndarray) -> Tensor:
        if name in self.named:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(arr, requires_grad=True)
        self.named[name] = t
        return t


def _init_linear(reg, prefix, din, dout, rng) -> LinearParams:
    w = reg.add(f"{prefix}.w", trunc_normal(rng, (din, dout)))
    b = reg.add(f"{prefix}.b", np.zeros(dout))
    return LinearParams(w, b)


def _init_msa(reg, prefix, dim, heads, rng, qkv_bias) -> MsaParams:
    def weight(tag):
        return reg.add(f"{prefix}.w_{tag}", trunc_normal(rng, (dim, dim)))

    def bias(tag):
        return reg.add(f"{prefix}.b_{tag}", np.zeros(dim))

    w_q, w_k, w_v, w_o = weight("q"), weight("k"), weight("v"), weight("o")
    b_q = bias("q") if qkv_bias else None
    b_k = bias("k") if qkv_bias else None
    b_v = bias("v") if qkv_bias else None
    b_o = bias("o")  # output projection always carries a bias
    return MsaParams(heads=heads, w_q=w_q, w_k=w_k, w_v=w_v, w_o=w_o, b_q=b_q, b_k=b_k, b_v=b_v, b_o=b_o)


def _init_stream(reg, prefix, dim, ratio, rng) -> StreamBlockParams:
    hidden = ratio * dim
    return StreamBlockParams(
        norm1_gamma=reg.add(f"{prefix}.norm1.gamma", np.ones(dim)),
        norm1_beta=reg.add(f"{prefix}.norm1.beta", np.zeros(dim)),
        norm2_gamma=reg.add(f"{prefix}.norm2.gamma", np.ones(dim)),
        norm2_beta=reg.add(f"{prefix}.norm2.beta", np.zeros(dim)),
        mlp_w1=reg.add(f"{prefix}.mlp.w1", trunc_normal(rng, (dim, hidden))),
        mlp_b1=reg.add(f"{prefix}.mlp.b1", np.zeros(hidden)),
        mlp_w2=reg.add(f"{prefix}.mlp.w2", trunc_normal(rng, (hidden, dim))),
        mlp_b2=reg.add(f"{prefix}.mlp.b2", np.zeros(dim)),
    )


def _init_block(reg, prefix, cfg, dim, two_stream, shared, rng) -> EncoderParams:
    heads = cfg.heads_for(dim)
    if not two_stream:
        msa = _init_msa(reg, f"{prefix}.attn", dim, heads, rng, cfg.qkv_bias)
        streams = (_init_stream(reg, prefix, dim, cfg.mlp_ratio, rng),)
    elif shared:
        msa_shared = _init_msa(reg, f"{prefix}.shared.attn", dim, heads, rng, cfg.qkv_bias)
        msa = CrossFusionMsaParams(img=msa_shared, lm=msa_shared)
        streams = (_init_stream(reg, f"{prefix}.shared", dim, cfg.mlp_ratio, rng),)
    else:
        msa = CrossFusionMsaParams(
            img=_init_msa(reg, f"{prefix}.img.attn", dim, heads, rng, cfg.qkv_bias),
            lm=_init_msa(reg, f"{prefix}.lm.attn", dim, heads, rng, cfg.qkv_bias),
        )
        streams = (
            _init_stream(reg, f"{prefix}.img", dim, cfg.mlp_ratio, rng),
            _init_stream(reg, f"{prefix}.lm", dim, cfg.mlp_ratio, rng),
        )
    return EncoderParams(msa=msa, streams=streams, drop_path_rate=cfg.drop_path)


def build_params(cfg: ModelConfig) -> ModelParams:
    """Initialise all learnable tensors for ``cfg``.

    Projections and MLPs get truncated-normal weights (sigma 0.02, clipped
    at 2 sigma), biases start at zero, norm gamma/beta at one/zero. The
    draw order is the registration order, so equal configs (and seeds)
    give identical parameters.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    reg = _Registry()
    two_stream = cfg.variant in TWO_STREAM_VARIANTS
    swap = cfg.effective_swap_depth()
    levels = []
    for i, dim in enumerate(cfg.level_dims()):
        prefix = f"level{i}"
        if two_stream:
            proj_img = _init_linear(reg, f"{prefix}.proj_img", cfg.base_dim, dim, rng)
            proj_lm = _init_linear(reg, f"{prefix}.proj_lm", cfg.base_dim, dim, rng)
            proj = None
        else:
            proj_img = proj_lm = None
            proj = _init_linear(reg, f"{prefix}.proj", cfg.base_dim, dim, rng)
        blocks = []
        for j in range(cfg.depth):
            shared = two_stream and cfg.share_unswapped and j >= swap
            blocks.append(_init_block(reg, f"{prefix}.block{j}", cfg, dim, two_stream, shared, rng))
        levels.append(
            LevelParams(
                dim=dim,
                stack=StackParams(blocks=blocks, swap_depth=min(swap, cfg.depth)),
                proj_img=proj_img,
                proj_lm=proj_lm,
                proj=proj,
            )
        )
    feat = cfg.feature_dim()
    hidden = cfg.head_hidden_dim()
    head = HeadParams(
        w1=reg.add("head.w1", trunc_normal(rng, (feat, hidden))),
        b1=reg.add("head.b1", np.zeros(hidden)),
        w2=reg.add("head.w2", trunc_normal(rng, (hidden, cfg.num_classes))),
        b2=reg.add("head.b2", np.zeros(cfg.num_classes)),
    )
    return ModelParams(levels=levels, head=head, named=reg.named)


# ---------------------------------------------------------------------------
# forward passes


def project_levels(x: Tensor, projections) -> list:
    """Apply one learned projection per pyramid level to (.., P, base_dim)."""
    return [linear(x, p.w, p.b) for p in projections]


def _head_forward(feat: Tensor, head: HeadParams) -> Tensor:
    return linear(gelu(linear(feat, head.w1, head.b1)), head.w2, head.b2)


def poster_forward(
    x_img: Tensor,
    x_lm: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool,
    rng=None,
    trace: AttentionTrace | None = None,
) -> Tensor:
    """Two-stream forward: per level, a query-swap stack, then mean-pool
    each stream and concatenate everything into the classifier head."""
    if cfg.variant not in TWO_STREAM_VARIANTS:
        raise ValueError(f"poster_forward needs a two-stream variant, got {cfg.variant!r}")
    pooled = []
    for i, lvl in enumerate(params.levels):
        xi = linear(x_img, lvl.proj_img.w, lvl.proj_img.b)
        xl = linear(x_lm, lvl.proj_lm.w, lvl.proj_lm.b)
        yi, yl = stack_forward(
            xi, xl, lvl.stack, training, rng, pre_msa_norm=cfg.pre_msa_norm, trace=trace, level=i
        )
        pooled.append(mean_pool_patches(yi))
        pooled.append(mean_pool_patches(yl))
    return _head_forward(concat(pooled, axis=-1), params.head)


def baseline_forward(
    x_img: Tensor,
    x_lm: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool,
    rng=None,
    trace: AttentionTrace | None = None,
) -> Tensor:
    """Patch-concatenate the streams into a 2P x D matrix, then run plain
    self-attention stacks (one per level) and pool."""
    if cfg.variant not in FUSED_VARIANTS:
        raise ValueError(f"baseline_forward needs a fused variant, got {cfg.variant!r}")
    fused = concat_patches(x_img, x_lm)
    pooled = []
    for i, lvl in enumerate(params.levels):
        x = linear(fused, lvl.proj.w, lvl.proj.b)
        y = fused_stack_forward(
            x, lvl.stack.blocks, training, rng, pre_msa_norm=cfg.pre_msa_norm, trace=trace, level=i
        )
        pooled.append(mean_pool_patches(y))
    return _head_forward(concat(pooled, axis=-1), params.head)


def single_stream_forward(
    x: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool,
    rng=None,
    trace: AttentionTrace | None = None,
) -> Tensor:
    """One stream through plain self-attention stacks, pooled into the head."""
    if cfg.variant not in SINGLE_VARIANTS:
        raise ValueError(f"single_stream_forward needs a single-stream variant, got {cfg.variant!r}")
    pooled = []
    for i, lvl in enumerate(params.levels):
        z = linear(x, lvl.proj.w, lvl.proj.b)
        y = fused_stack_forward(
            z, lvl.stack.blocks, training, rng, pre_msa_norm=cfg.pre_msa_norm, trace=trace, level=i
        )
        pooled.append(mean_pool_patches(y))
    return _head_forward(concat(pooled, axis=-1), params.head)


def forward(
    x_img: Tensor,
    x_lm: Tensor,
    params: ModelParams,
    cfg: ModelConfig,
    training: bool,
    rng=None,
    trace: AttentionTrace | None = None,
) -> Tensor:
    """Variant dispatch. Inputs are (.., P, base_dim) per stream; output is
    (.., num_classes) logits."""
    if cfg.variant == "landmark_only":
        return single_stream_forward(x_lm, params, cfg, training, rng, trace)
    if cfg.variant == "image_only":
        return single_stream_forward(x_img, params, cfg, training, rng, trace)
    if cfg.variant in FUSED_VARIANTS:
        return baseline_forward(x_img, x_lm, params, cfg, training, rng, trace)
    return poster_forward(x_img, x_lm, params, cfg, training, rng, trace)


# ---------------------------------------------------------------------------
# accounting


def _msa_param_count(dim: int, qkv_bias: bool) -> int:
    return 4 * dim * dim + (3 * dim if qkv_bias else 0) + dim


def _stream_param_count(dim: int, ratio: int) -> int:
    # two norm sites (2 * 2D) + MLP weights and biases
    return 4 * dim + 2 * ratio * dim * dim + (ratio + 1) * dim


def count_params(cfg: ModelConfig) -> dict:
    """Exact learnable-scalar counts, by component and in total.

    The returned dict mirrors the registered name map: summing the sizes
    of the actual ModelParams tensors gives the same numbers. Keys:
    ``projections``, ``blocks``, ``head``, ``total``, and ``per_level``
    with one entry per pyramid level.
    """
    two_stream = cfg.variant in TWO_STREAM_VARIANTS
    swap = cfg.effective_swap_depth()
    per_level = []
    proj_total = 0
    block_total = 0
    for dim in cfg.level_dims():
        n_proj_sets = 2 if two_stream else 1
        proj = n_proj_sets * (cfg.base_dim * dim + dim)
        one_stream = _msa_param_count(dim, cfg.qkv_bias) + _stream_param_count(dim, cfg.mlp_ratio)
        blocks = 0
        for j in range(cfg.depth):
            if not two_stream:
                blocks += one_stream
            elif cfg.share_unswapped and j >= swap:
                blocks += one_stream
            else:
                blocks += 2 * one_stream
        per_level.append({"dim": dim, "projections": proj, "blocks": blocks})
        proj_total += proj
        block_total += blocks
    feat = cfg.feature_dim()
    hidden = cfg.head_hidden_dim()
    head = feat * hidden + hidden + hidden * cfg.num_classes + cfg.num_classes
    return {
        "projections": proj_total,
        "blocks": block_total,
        "head": head,
        "total": proj_total + block_total + head,
        "per_level": per_level,
    }


def estimate_flops(cfg: ModelConfig) -> dict:
    """Analytic multiply-accumulate count for one forward sample.

    Counted: every linear map as rows * Din * Dout, attention scores and
    value mixing as 2 * heads * rows^2 * head_dim = 2 * rows^2 * dim per
    stream per block, and the MLP as 2 * ratio * rows * dim^2. Softmax,
    norms, GELU and pooling are not MACs and are not counted. The
    ``formula`` entry spells this out.
    """
    p = cfg.patches
    two_stream = cfg.variant in TWO_STREAM_VARIANTS
    fused = cfg.variant in FUSED_VARIANTS
    projections = 0
    attn_linear = 0
    attn_scores = 0
    mlp = 0
    for dim in cfg.level_dims():
        if two_stream:
            stream_rows = [p, p]
        elif fused:
            stream_rows = [2 * p]
        else:
            stream_rows = [p]
        for rows in stream_rows:
            projections += rows * cfg.base_dim * dim
            attn_linear += cfg.depth * 4 * rows * dim * dim
            attn_scores += cfg.depth * 2 * rows * rows * dim
            mlp += cfg.depth * 2 * cfg.mlp_ratio * rows * dim * dim
    feat = cfg.feature_dim()
    hidden = cfg.head_hidden_dim()
    head = feat * hidden + hidden * cfg.num_classes
    total = projections + attn_linear + attn_scores + mlp + head
    return {
        "projections": projections,
        "attention_linear": attn_linear,
        "attention_scores": attn_scores,
        "mlp": mlp,
        "head": head,
        "total": total,
        "formula": (
            "MACs: linear = rows*Din*Dout; attention = 4*rows*D^2 (q,k,v,out) "
            "+ 2*rows^2*D (scores, values) per stream per block; "
            "mlp = 2*ratio*rows*D^2; head = F*H + H*N. rows = P per stream, "
            "2P fused; softmax/norm/gelu/pooling uncounted."
        ),
    }
