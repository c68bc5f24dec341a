"""Two-branch RGB-D feature encoder with attentive fusion.

The encoder runs a small convolutional stack per modality (1/4 resolution
output), lets each branch attend over a max-pool-downsampled copy of
itself (self-attention), exchanges information between branches the same
way (cross-attention, both directions, independent weights), and finally
recalibrates channels with a squeeze-and-excite style gating applied
several times in sequence. Either branch set can be ablated away; the
configuration decides which parameter groups exist at all.

Attention keys and values always come from the pooled map: with a (3, 5)
kernel the quadratic attention cost drops by 15x while queries stay at
full feature resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor, concat, conv2d, instance_norm, matmul, maxpool2d
from .tape import relu, replicate_pad2d, reshape, scale, sigmoid, softmax, transpose
from .weights import conv_param, he_normal, linear_param, zeros_param

DOWNSAMPLE = 4  # fixed by the conv stack: two stride-2 convolutions

RGB_CHANNELS = 3
DEPTH_CHANNELS = 2  # normalized depth + validity


@dataclass(frozen=True)
class EncoderConfig:
    """Shape and ablation switches for one fused encoder instance."""

    channels: int = 64
    heads: int = 4
    n_mmtm: int = 3
    pool_kernel: tuple[int, int] = (3, 5)
    z_max: float = 10.0
    use_self_attention: bool = True
    self_attention_rgb_only: bool = False
    use_cross_attention: bool = True
    fusion: str = "mmtm"  # "mmtm" | "concat"
    rgb_only: bool = False
    d_z: int = 0  # 0 -> channels // 2

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be positive")
        if self.heads < 1 or self.channels % self.heads:
            raise ValueError(
                f"heads ({self.heads}) must divide channels ({self.channels})"
            )
        if self.fusion not in ("mmtm", "concat"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.rgb_only and self.use_cross_attention:
            raise ValueError("cross-attention needs both branches (rgb_only set)")
        kh, kw = self.pool_kernel
        if kh < 1 or kw < 1:
            raise ValueError("pool_kernel entries must be positive")
        if self.z_max <= 0:
            raise ValueError("z_max must be positive")

    @property
    def dz(self) -> int:
        return self.d_z if self.d_z else max(self.channels // 2, 1)

    @property
    def out_channels(self) -> int:
        return self.channels if self.rgb_only else 2 * self.channels

    @property
    def has_depth_branch(self) -> bool:
        return not self.rgb_only

    @property
    def has_sa_rgb(self) -> bool:
        return self.use_self_attention

    @property
    def has_sa_depth(self) -> bool:
        return (
            self.use_self_attention
            and self.has_depth_branch
            and not self.self_attention_rgb_only
        )

    @property
    def has_mmtm(self) -> bool:
        return self.has_depth_branch and self.fusion == "mmtm"


@dataclass
class FeatureMap:
    """A (channels, height, width) tensor tagged with its provenance in
    the encoder pipeline; tags make stage contracts testable."""

    tensor: Tensor
    branch: str  # "rgb" | "depth"
    stage: str  # "low" | "pooled" | "self" | "cross" | "gated"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape


# ---------------------------------------------------------------------------
# parameter construction


def _init_branch(params: dict, path: str, c_in: int, d: int, seed: int) -> None:
    # the first five convs feed an instance norm, which cancels any
    # constant channel shift, so they carry no bias parameter at all
    conv_param(params, f"{path}.conv1", d, c_in, 7, seed, bias=False)
    for blk in ("res1", "res2"):
        conv_param(params, f"{path}.{blk}.conv1", d, d, 3, seed, bias=False)
        conv_param(params, f"{path}.{blk}.conv2", d, d, 3, seed, bias=False)
    conv_param(params, f"{path}.conv2", d, d, 3, seed)


def _init_attention(params: dict, path: str, d: int, heads: int, seed: int) -> None:
    # Only biases that can act survive here. A key bias adds a per-query
    # constant to the logits, which softmax cancels exactly; value and
    # output biases add a position-independent shift that the MLP's
    # instance norms cancel exactly. The query bias does real work (it
    # shifts logits by bq . k_j, which varies over keys), so it stays.
    dh = d // heads
    for i in range(heads):
        for proj in ("wq", "wk", "wv"):
            he_normal(params, f"{path}.h{i}.{proj}", (d, dh), d, seed)
        zeros_param(params, f"{path}.h{i}.bq", (dh,))
    he_normal(params, f"{path}.wo", (d, d), d, seed)
    # three-layer position-wise MLP d -> 2d -> 2d -> d; the final layer is
    # zero-initialized so a fresh attention block is an exact identity,
    # and it alone keeps a bias (the first two feed instance norms)
    linear_param(params, f"{path}.mlp.l1", d, 2 * d, seed, bias=False)
    linear_param(params, f"{path}.mlp.l2", 2 * d, 2 * d, seed, bias=False)
    zeros_param(params, f"{path}.mlp.l3.w", (2 * d, d))
    zeros_param(params, f"{path}.mlp.l3.b", (d,))


def _init_mmtm(params: dict, path: str, d: int, dz: int, seed: int) -> None:
    he_normal(params, f"{path}.w", (dz, 2 * d), 2 * d, seed)
    zeros_param(params, f"{path}.b", (dz, 1))
    he_normal(params, f"{path}.wr", (d, dz), dz, seed)
    he_normal(params, f"{path}.wd", (d, dz), dz, seed)


def init_encoder_params(cfg: EncoderConfig, seed: int, prefix: str) -> dict[str, Tensor]:
    """All parameters of one encoder instance, keyed by dotted path.

    Disabled blocks contribute no entries at all, so a parameter listing
    doubles as an ablation audit.
    """
    params: dict[str, Tensor] = {}
    d = cfg.channels
    _init_branch(params, f"{prefix}.rgb", RGB_CHANNELS, d, seed)
    if cfg.has_depth_branch:
        _init_branch(params, f"{prefix}.depth", DEPTH_CHANNELS, d, seed)
    if cfg.has_sa_rgb:
        _init_attention(params, f"{prefix}.sa_rgb", d, cfg.heads, seed)
    if cfg.has_sa_depth:
        _init_attention(params, f"{prefix}.sa_depth", d, cfg.heads, seed)
    if cfg.use_cross_attention:
        _init_attention(params, f"{prefix}.ca_rgb", d, cfg.heads, seed)
        _init_attention(params, f"{prefix}.ca_depth", d, cfg.heads, seed)
    if cfg.has_mmtm:
        for i in range(cfg.n_mmtm):
            _init_mmtm(params, f"{prefix}.mmtm{i}", d, cfg.dz, seed)
    return params


# ---------------------------------------------------------------------------
# forward stages


def depth_channels(depth: np.ndarray, z_max: float) -> np.ndarray:
    """Depth map (meters) -> 2-channel network input.

    Channel 0 is depth clamped to [0, z_max] and scaled to [0, 1] with
    invalid entries (non-positive or non-finite) zeroed; channel 1 is the
    validity indicator.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    z = np.clip(np.where(valid, depth, 0.0) / z_max, 0.0, 1.0)
    return np.ascontiguousarray(np.stack([z, valid.astype(np.float64)]))


def extract_low_level(
    image, params: dict, prefix: str, branch: str = "rgb"
) -> FeatureMap:
    """Convolutional stem: 7x7/2 conv, two residual blocks, 3x3/2 conv.

    Output resolution is input/4. Instance norm after every conv except
    the last keeps activations photometric-shift invariant.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim != 3:
        raise tape.ShapeError(f"expected (C,H,W) input, got {x.shape}")
    p = lambda k: params[f"{prefix}.{branch}.{k}"]
    h = relu(instance_norm(conv2d(x, p("conv1.w"), stride=2, padding=3)))
    for blk in ("res1", "res2"):
        y = relu(instance_norm(conv2d(h, p(f"{blk}.conv1.w"), padding=1)))
        y = relu(instance_norm(conv2d(y, p(f"{blk}.conv2.w"), padding=1)))
        h = h + y
    h = conv2d(h, p("conv2.w"), p("conv2.b"), stride=2, padding=1)
    return FeatureMap(h, branch, "low")


def downsample_kv(fm: FeatureMap, pool_kernel: tuple[int, int] = (3, 5)) -> FeatureMap:
    """Max-pool a feature map for use as attention keys/values.

    Edge-replication padding on the bottom/right lets any extent through;
    the pooled grid is (ceil(H/kh), ceil(W/kw)), so the pooled value set
    is a per-channel subset of the input values.
    """
    kh, kw = pool_kernel
    _, h, w = fm.tensor.shape
    ph = (-h) % kh
    pw = (-w) % kw
    padded = replicate_pad2d(fm.tensor, ph, pw)
    pooled = maxpool2d(padded, (kh, kw))
    return FeatureMap(pooled, fm.branch, "pooled")


def _positions(t: Tensor) -> Tensor:
    d, h, w = t.shape
    return transpose(reshape(t, (d, h * w)))


def _grid(t: Tensor, h: int, w: int) -> Tensor:
    return reshape(transpose(t), (t.shape[1], h, w))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, inv_temp: float) -> Tensor:
    """softmax(q k^T * inv_temp) v for row-major position matrices.

    Each output row is a convex combination of value rows; uniform value
    rows therefore pass through unchanged no matter what the attention
    distribution looks like.
    """
    logits = scale(matmul(q, transpose(k)), inv_temp)
    return matmul(softmax(logits, axis=1), v)


def attention_context(
    f_mat: Tensor, kv_mat: Tensor, params: dict, path: str, heads: int
) -> Tensor:
    """Multi-head attention read: queries from ``f_mat`` (N, D), keys and
    values from ``kv_mat`` (J, D); concatenated heads projected back to D."""
    d = f_mat.shape[1]
    dh = d // heads
    inv_temp = 1.0 / math.sqrt(dh)
    ctxs = []
    for i in range(heads):
        g = lambda k: params[f"{path}.h{i}.{k}"]
        q = matmul(f_mat, g("wq")) + g("bq")
        k_proj = matmul(kv_mat, g("wk"))
        v = matmul(kv_mat, g("wv"))
        ctxs.append(scaled_dot_attention(q, k_proj, v, inv_temp))
    ctx = concat(ctxs, axis=1)
    return matmul(ctx, params[f"{path}.wo"])


def _mlp(x: Tensor, params: dict, path: str) -> Tensor:
    h = relu(instance_norm(matmul(x, params[f"{path}.mlp.l1.w"]), channel_axis=1))
    h = relu(instance_norm(matmul(h, params[f"{path}.mlp.l2.w"]), channel_axis=1))
    return matmul(h, params[f"{path}.mlp.l3.w"]) + params[f"{path}.mlp.l3.b"]


def _attention_block(
    x: Tensor, kv: Tensor, params: dict, path: str, heads: int
) -> Tensor:
    _, h, w = x.shape
    f_mat = _positions(x)
    kv_mat = _positions(kv)
    ctx = attention_context(f_mat, kv_mat, params, path, heads)
    out = f_mat + _mlp(ctx, params, path)
    return _grid(out, h, w)


def self_attention(
    fm: FeatureMap, pooled: FeatureMap, params: dict, path: str, heads: int = 4
) -> FeatureMap:
    """Attend over a pooled copy of the same branch; residual output."""
    out = _attention_block(fm.tensor, pooled.tensor, params, path, heads)
    return FeatureMap(out, fm.branch, "self")


def cross_attention(
    fm: FeatureMap, pooled_other: FeatureMap, params: dict, path: str, heads: int = 4
) -> FeatureMap:
    """Attend over the pooled map of the other branch; residual output."""
    out = _attention_block(fm.tensor, pooled_other.tensor, params, path, heads)
    return FeatureMap(out, fm.branch, "cross")


def mmtm_gate(
    fm_rgb: FeatureMap, fm_depth: FeatureMap, params: dict, path: str
) -> tuple[FeatureMap, FeatureMap]:
    """Squeeze both branches, project jointly, excite each branch.

    Gates are 2*sigmoid(.), i.e. strictly inside (0, 2) with 1 as the
    neutral point reached by zero weights.
    """
    d = fm_rgb.tensor.shape[0]
    s_r = reshape(fm_rgb.tensor.mean(axes=(1, 2)), (d, 1))
    s_d = reshape(fm_depth.tensor.mean(axes=(1, 2)), (d, 1))
    joint = concat([s_r, s_d], axis=0)
    z = matmul(params[f"{path}.w"], joint) + params[f"{path}.b"]
    gate_r = scale(sigmoid(matmul(params[f"{path}.wr"], z)), 2.0)
    gate_d = scale(sigmoid(matmul(params[f"{path}.wd"], z)), 2.0)
    out_r = fm_rgb.tensor * reshape(gate_r, (d, 1, 1))
    out_d = fm_depth.tensor * reshape(gate_d, (d, 1, 1))
    return (
        FeatureMap(out_r, fm_rgb.branch, "gated"),
        FeatureMap(out_d, fm_depth.branch, "gated"),
    )


def mff_encode(
    rgb, depth, params: dict, cfg: EncoderConfig, prefix: str = "fnet"
) -> Tensor:
    """Full fused encoding of one RGB-D frame.

    ``rgb`` is (3, H, W) in [0, 1]; ``depth`` is (H, W) meters (ignored
    when the config is rgb-only). Returns (out_channels, H/4, W/4).
    """
    f_r = extract_low_level(rgb, params, prefix, "rgb")
    f_d = None
    if cfg.has_depth_branch:
        if depth is None:
            raise ValueError("two-branch config needs a depth map")
        d_in = depth if isinstance(depth, Tensor) else Tensor(depth_channels(depth, cfg.z_max))
        f_d = extract_low_level(d_in, params, prefix, "depth")

    if cfg.has_sa_rgb:
        f_r = self_attention(f_r, downsample_kv(f_r, cfg.pool_kernel), params, f"{prefix}.sa_rgb", cfg.heads)
    if cfg.has_sa_depth:
        f_d = self_attention(f_d, downsample_kv(f_d, cfg.pool_kernel), params, f"{prefix}.sa_depth", cfg.heads)

    if cfg.use_cross_attention:
        # both directions read the pre-exchange maps: simultaneous update
        pooled_r = downsample_kv(f_r, cfg.pool_kernel)
        pooled_d = downsample_kv(f_d, cfg.pool_kernel)
        f_r2 = cross_attention(f_r, pooled_d, params, f"{prefix}.ca_rgb", cfg.heads)
        f_d2 = cross_attention(f_d, pooled_r, params, f"{prefix}.ca_depth", cfg.heads)
        f_r, f_d = f_r2, f_d2

    if not cfg.has_depth_branch:
        return f_r.tensor

    if cfg.has_mmtm:
        for i in range(cfg.n_mmtm):
            f_r, f_d = mmtm_gate(f_r, f_d, params, f"{prefix}.mmtm{i}")
    return concat([f_r.tensor, f_d.tensor], axis=0)
