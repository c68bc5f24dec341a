"""Correlation pyramid, recurrent flow refinement, and 2D->3D lifting.

The flow core follows the all-pairs recurrent recipe: encode both frames,
build the full 4-D correlation volume once, pool its target dimensions
into a pyramid, then iterate a ConvGRU that looks up a local correlation
neighborhood around the current flow estimate and emits a flow delta.

Everything here is differentiable end to end, including the bilinear
pyramid lookup (w.r.t. both the volume and the query coordinates) and the
flow carried across iterations; analytic gradients therefore agree with
finite differences of the whole forward pass, which the gradcheck harness
exercises exhaustively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .encoder import DOWNSAMPLE, EncoderConfig, init_encoder_params, mff_encode
from .tape import (
    ShapeError,
    Tensor,
    avgpool2d,
    concat,
    conv2d,
    make_op,
    matmul,
    narrow,
    relu,
    reshape,
    scale,
    sigmoid,
    tabs,
    tanh,
    transpose,
    tsum,
)
from .weights import conv_param


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: pixel (x, y) at depth z backprojects to
    ((x-cx) z / fx, (y-cy) z / fy, z)."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def backproject(self, x, y, z):
        bx = (np.asarray(x, dtype=np.float64) - self.cx) * z / self.fx
        by = (np.asarray(y, dtype=np.float64) - self.cy) * z / self.fy
        return bx, by, np.asarray(z, dtype=np.float64)


@dataclass(frozen=True)
class ModelConfig:
    """Flow network shape: encoder config plus refinement knobs."""

    encoder: EncoderConfig
    corr_levels: int = 4
    radius: int = 4
    iterations: int = 8

    def __post_init__(self):
        if self.corr_levels < 1:
            raise ValueError("corr_levels must be >= 1")
        if self.radius < 1:
            raise ValueError("radius must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.encoder.out_channels % 2:
            raise ValueError("encoder out_channels must be even to split hidden/context")

    @property
    def hidden_channels(self) -> int:
        return self.encoder.out_channels // 2

    @property
    def context_channels(self) -> int:
        return self.encoder.out_channels - self.hidden_channels

    @property
    def corr_feature_channels(self) -> int:
        return self.corr_levels * (2 * self.radius + 1) ** 2

    @property
    def divisor(self) -> int:
        """Input extents must be multiples of this."""
        return DOWNSAMPLE * 2 ** (self.corr_levels - 1)

    def to_flat(self) -> dict[str, str]:
        """Serialize every architecture field as flat strings, suitable
        for a checkpoint meta block or a key=value config file."""
        enc = self.encoder
        return {
            "channels": str(enc.channels),
            "heads": str(enc.heads),
            "n_mmtm": str(enc.n_mmtm),
            "pool_kh": str(enc.pool_kernel[0]),
            "pool_kw": str(enc.pool_kernel[1]),
            "z_max": repr(float(enc.z_max)),
            "use_self_attention": str(enc.use_self_attention).lower(),
            "self_attention_rgb_only": str(enc.self_attention_rgb_only).lower(),
            "use_cross_attention": str(enc.use_cross_attention).lower(),
            "fusion": enc.fusion,
            "rgb_only": str(enc.rgb_only).lower(),
            "d_z": str(enc.d_z),
            "corr_levels": str(self.corr_levels),
            "radius": str(self.radius),
            "iterations": str(self.iterations),
        }

    @classmethod
    def from_flat(cls, flat: dict) -> "ModelConfig":
        def boolean(key):
            value = flat[key]
            if value not in ("true", "false"):
                raise ValueError(f"{key} must be true or false, got {value!r}")
            return value == "true"

        try:
            encoder = EncoderConfig(
                channels=int(flat["channels"]),
                heads=int(flat["heads"]),
                n_mmtm=int(flat["n_mmtm"]),
                pool_kernel=(int(flat["pool_kh"]), int(flat["pool_kw"])),
                z_max=float(flat["z_max"]),
                use_self_attention=boolean("use_self_attention"),
                self_attention_rgb_only=boolean("self_attention_rgb_only"),
                use_cross_attention=boolean("use_cross_attention"),
                fusion=flat["fusion"],
                rgb_only=boolean("rgb_only"),
                d_z=int(flat["d_z"]),
            )
            return cls(
                encoder=encoder,
                corr_levels=int(flat["corr_levels"]),
                radius=int(flat["radius"]),
                iterations=int(flat["iterations"]),
            )
        except KeyError as exc:
            raise ValueError(f"model config is missing key {exc.args[0]!r}") from None


@dataclass
class CorrelationPyramid:
    """All-pairs correlation pooled over the target dimensions.

    ``levels[i]`` has shape (H, W, H/2^i, W/2^i); level 0 is the raw
    volume."""

    levels: list[Tensor]

    @property
    def scales(self) -> list[int]:
        return [2**i for i in range(len(self.levels))]


@dataclass
class UpdateState:
    hidden: Tensor  # (Dh, h, w)
    context: Tensor  # (Dc, h, w)
    flow: Tensor  # (2, h, w) at feature resolution


def build_correlation(f1: Tensor, f2: Tensor) -> Tensor:
    """Full 4-D correlation volume <f1(i,j), f2(k,l)> / sqrt(C)."""
    if f1.shape != f2.shape:
        raise ShapeError(f"feature shapes differ: {f1.shape} vs {f2.shape}")
    c, h, w = f1.shape
    m1 = transpose(reshape(f1, (c, h * w)))  # (N, C)
    m2 = reshape(f2, (c, h * w))  # (C, N)
    vol = scale(matmul(m1, m2), 1.0 / math.sqrt(c))
    return reshape(vol, (h, w, h, w))


def build_pyramid(volume: Tensor, levels: int = 4) -> CorrelationPyramid:
    """Average-pool the target dims by 2 per level; needs the target
    extents divisible by 2^(levels-1)."""
    if volume.ndim != 4:
        raise ShapeError(f"correlation volume must be 4-D, got {volume.shape}")
    h2, w2 = volume.shape[2], volume.shape[3]
    div = 2 ** (levels - 1)
    if h2 % div or w2 % div:
        raise ShapeError(
            f"target extents ({h2},{w2}) not divisible by 2^(levels-1)={div}"
        )
    out = [volume]
    for _ in range(levels - 1):
        out.append(avgpool2d(out[-1], 2))
    return CorrelationPyramid(out)


def _lookup_level(level: Tensor, cx: Tensor, cy: Tensor, radius: int) -> Tensor:
    """Bilinear window read of one pyramid level.

    ``level`` is (H, W, Hl, Wl); ``cx``/``cy`` are (H, W) query-center
    coordinates in level units. Returns ((2r+1)^2, H, W), window taps in
    row-major (dy, dx) order. Out-of-range taps clamp to the edge and
    contribute zero positional gradient.
    """
    hq, wq = cx.shape
    hl, wl = level.shape[2], level.shape[3]
    side = 2 * radius + 1
    t = side * side
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    dys = np.repeat(offs, side)[:, None, None]
    dxs = np.tile(offs, side)[:, None, None]

    px = cx.data[None, :, :] + dxs  # (T, H, W)
    py = cy.data[None, :, :] + dys
    pxc = np.clip(px, 0.0, wl - 1.0)
    pyc = np.clip(py, 0.0, hl - 1.0)
    if wl > 1:
        x0 = np.minimum(np.floor(pxc), wl - 2).astype(np.intp)
        fx = pxc - x0
    else:
        x0 = np.zeros(px.shape, dtype=np.intp)
        fx = np.zeros(px.shape)
    if hl > 1:
        y0 = np.minimum(np.floor(pyc), hl - 2).astype(np.intp)
        fy = pyc - y0
    else:
        y0 = np.zeros(py.shape, dtype=np.intp)
        fy = np.zeros(py.shape)
    x1 = np.minimum(x0 + 1, wl - 1)
    y1 = np.minimum(y0 + 1, hl - 1)

    qi = np.broadcast_to(np.arange(hq, dtype=np.intp)[None, :, None], px.shape)
    qj = np.broadcast_to(np.arange(wq, dtype=np.intp)[None, None, :], px.shape)
    lv = level.data
    v00 = lv[qi, qj, y0, x0]
    v01 = lv[qi, qj, y0, x1]
    v10 = lv[qi, qj, y1, x0]
    v11 = lv[qi, qj, y1, x1]
    wx0, wy0 = 1.0 - fx, 1.0 - fy
    out = wy0 * wx0 * v00 + wy0 * fx * v01 + fy * wx0 * v10 + fy * fx * v11

    # positional gradients vanish where the tap clamped (strictly outside
    # the open interval); exactly-on-boundary taps take the zero branch
    gate_x = (px > 0.0) & (px < wl - 1.0)
    gate_y = (py > 0.0) & (py < hl - 1.0)

    def backward(g):
        gl = np.zeros(lv.shape, dtype=np.float64)
        np.add.at(gl, (qi, qj, y0, x0), g * wy0 * wx0)
        np.add.at(gl, (qi, qj, y0, x1), g * wy0 * fx)
        np.add.at(gl, (qi, qj, y1, x0), g * fy * wx0)
        np.add.at(gl, (qi, qj, y1, x1), g * fy * fx)
        dvdx = wy0 * (v01 - v00) + fy * (v11 - v10)
        dvdy = wx0 * (v10 - v00) + fx * (v11 - v01)
        gcx = (g * dvdx * gate_x).sum(axis=0)
        gcy = (g * dvdy * gate_y).sum(axis=0)
        return gl, gcx, gcy

    return make_op(np.ascontiguousarray(out), (level, cx, cy), backward)


def lookup(pyr: CorrelationPyramid, flow: Tensor, radius: int = 4) -> Tensor:
    """Correlation features around the current flow estimate.

    Concatenates every level's (2r+1)^2 window, level-major, giving
    (levels * (2r+1)^2, H, W).
    """
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    if pyr.levels[0].shape[0] != h or pyr.levels[0].shape[1] != w:
        raise ShapeError(
            f"flow grid {flow.shape[1:]} does not match pyramid {pyr.levels[0].shape[:2]}"
        )
    xg = np.tile(np.arange(w, dtype=np.float64), (h, 1))
    yg = np.tile(np.arange(h, dtype=np.float64)[:, None], (1, w))
    tx = reshape(narrow(flow, 0, 0, 1), (h, w)) + Tensor(xg)
    ty = reshape(narrow(flow, 0, 1, 1), (h, w)) + Tensor(yg)
    outs = []
    for level, s in zip(pyr.levels, pyr.scales):
        outs.append(_lookup_level(level, scale(tx, 1.0 / s), scale(ty, 1.0 / s), radius))
    return concat(outs, axis=0)


# ---------------------------------------------------------------------------
# recurrent update


def init_update_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    dm = cfg.hidden_channels
    dh = cfg.hidden_channels
    dc = cfg.context_channels
    conv_param(params, "update.motion.conv1", dm, cfg.corr_feature_channels + 2, 1, seed)
    conv_param(params, "update.motion.conv2", dm, dm, 3, seed)
    x_ch = dm + dc
    for gate in ("convz", "convr", "convq"):
        conv_param(params, f"update.gru.{gate}", dh, dh + x_ch, 3, seed)
    conv_param(params, "update.flowhead.conv1", dh, dh, 3, seed)
    conv_param(params, "update.flowhead.conv2", 2, dh, 3, seed)
    return params


def update_step(
    state: UpdateState, corr_feats: Tensor, params: dict, cfg: ModelConfig
) -> UpdateState:
    """One ConvGRU refinement: motion features -> gated hidden update ->
    flow delta added onto the carried estimate."""
    p = lambda k: params[f"update.{k}"]
    motion_in = concat([corr_feats, state.flow], axis=0)
    m = relu(conv2d(motion_in, p("motion.conv1.w"), p("motion.conv1.b")))
    m = relu(conv2d(m, p("motion.conv2.w"), p("motion.conv2.b"), padding=1))
    x = concat([m, state.context], axis=0)
    hx = concat([state.hidden, x], axis=0)
    z = sigmoid(conv2d(hx, p("gru.convz.w"), p("gru.convz.b"), padding=1))
    r = sigmoid(conv2d(hx, p("gru.convr.w"), p("gru.convr.b"), padding=1))
    rx = concat([r * state.hidden, x], axis=0)
    q = tanh(conv2d(rx, p("gru.convq.w"), p("gru.convq.b"), padding=1))
    hidden = (1.0 - z) * state.hidden + z * q
    fh = relu(conv2d(hidden, p("flowhead.conv1.w"), p("flowhead.conv1.b"), padding=1))
    dflow = conv2d(fh, p("flowhead.conv2.w"), p("flowhead.conv2.b"), padding=1)
    return UpdateState(hidden, state.context, state.flow + dflow)


def _resize_matrix(n_out: int, n_in: int, factor: int) -> np.ndarray:
    """1-D bilinear interpolation matrix, half-pixel-center convention."""
    rows = np.zeros((n_out, n_in), dtype=np.float64)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    if n_in == 1:
        rows[:, 0] = 1.0
        return rows
    i0 = np.minimum(np.floor(src), n_in - 2).astype(int)
    f = src - i0
    rows[np.arange(n_out), i0] += 1.0 - f
    rows[np.arange(n_out), i0 + 1] += f
    return rows


def upsample_flow(flow: Tensor, factor: int = DOWNSAMPLE) -> Tensor:
    """Bilinear-resize a (2, h, w) flow field by ``factor`` and scale the
    displacement values to match the new resolution."""
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be (2, h, w), got {flow.shape}")
    _, h, w = flow.shape
    ry = Tensor(_resize_matrix(h * factor, h, factor))
    rxt = Tensor(np.ascontiguousarray(_resize_matrix(w * factor, w, factor).T))
    chans = []
    for c in range(2):
        m = reshape(narrow(flow, 0, c, 1), (h, w))
        up = matmul(matmul(ry, m), rxt)
        chans.append(reshape(up, (1, h * factor, w * factor)))
    return scale(concat(chans, axis=0), float(factor))


def sequence_loss(
    preds: list[Tensor],
    gt_flow: np.ndarray,
    valid: np.ndarray,
    gamma: float = 0.8,
    max_magnitude: float = 250.0,
) -> Tensor:
    """Exponentially weighted L1 over the refinement iterates.

    Iterate k of M carries weight gamma^(M-k); each term is the mean
    absolute endpoint difference over the valid pixels. Pixels whose
    ground-truth magnitude exceeds ``max_magnitude`` are excluded.
    """
    if not preds:
        raise ValueError("sequence_loss needs at least one prediction")
    gt = np.asarray(gt_flow, dtype=np.float64)
    if gt.shape != tuple(preds[0].shape):
        raise ShapeError(f"gt shape {gt.shape} does not match prediction {preds[0].shape}")
    mag = np.sqrt((gt**2).sum(axis=0))
    mask = np.asarray(valid, dtype=bool) & (mag <= max_magnitude)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("sequence_loss: no valid pixels after masking")
    maskf = Tensor(mask.astype(np.float64)[None, :, :])
    gt_t = Tensor(gt)
    m = len(preds)
    total = None
    for k, pred in enumerate(preds, start=1):
        err = scale(tsum(tabs(pred - gt_t) * maskf), 1.0 / n)
        term = scale(err, gamma ** (m - k))
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# whole-network assembly


class FlowModel:
    """Fused two-frame flow estimator: feature/context encoders plus the
    recurrent update block, with a flat parameter dictionary."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "FlowModel":
        params: dict[str, Tensor] = {}
        params.update(init_encoder_params(cfg.encoder, seed, "fnet"))
        params.update(init_encoder_params(cfg.encoder, seed, "cnet"))
        params.update(init_update_params(cfg, seed))
        return cls(cfg, params)

    def signature(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(t.shape) for k, t in sorted(self.params.items())}

    def parameter_groups(self) -> dict[str, list[str]]:
        """Partition of every parameter path into reporting groups."""
        groups: dict[str, list[str]] = {
            "encoder_convs": [],
            "attention_projections": [],
            "mlps": [],
            "mmtm": [],
            "recurrent_unit": [],
            "flow_head": [],
        }
        for path in sorted(self.params):
            if ".mlp." in path:
                groups["mlps"].append(path)
            elif ".sa_" in path or ".ca_" in path:
                groups["attention_projections"].append(path)
            elif ".mmtm" in path:
                groups["mmtm"].append(path)
            elif path.startswith("update.flowhead"):
                groups["flow_head"].append(path)
            elif path.startswith("update."):
                groups["recurrent_unit"].append(path)
            else:
                groups["encoder_convs"].append(path)
        return {k: v for k, v in groups.items() if v}

    def estimate(self, rgb1, depth1, rgb2, depth2, iterations: int | None = None) -> list[Tensor]:
        return estimate_flow(
            self.params, self.cfg, rgb1, depth1, rgb2, depth2, iterations
        )


def estimate_flow(
    params: dict,
    cfg: ModelConfig,
    rgb1,
    depth1,
    rgb2,
    depth2,
    iterations: int | None = None,
) -> list[Tensor]:
    """Run the full pipeline on one frame pair.

    Returns one full-resolution (2, H, W) prediction per refinement
    iteration; the last entry is the final estimate.
    """
    m = iterations if iterations is not None else cfg.iterations
    rgb1 = np.asarray(rgb1, dtype=np.float64)
    h, w = rgb1.shape[1], rgb1.shape[2]
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(
            f"input extent ({h},{w}) must be divisible by {cfg.divisor} "
            f"(downsample {DOWNSAMPLE} x pyramid 2^{cfg.corr_levels - 1}); crop or pad first"
        )
    f1 = mff_encode(rgb1, depth1, params, cfg.encoder, "fnet")
    f2 = mff_encode(rgb2, depth2, params, cfg.encoder, "fnet")
    pyr = build_pyramid(build_correlation(f1, f2), cfg.corr_levels)

    ctx_out = mff_encode(rgb1, depth1, params, cfg.encoder, "cnet")
    dh = cfg.hidden_channels
    hidden = tanh(narrow(ctx_out, 0, 0, dh))
    context = relu(narrow(ctx_out, 0, dh, cfg.context_channels))

    hf, wf = h // DOWNSAMPLE, w // DOWNSAMPLE
    state = UpdateState(hidden, context, Tensor(np.zeros((2, hf, wf))))
    preds = []
    for _ in range(m):
        corr_feats = lookup(pyr, state.flow, cfg.radius)
        state = update_step(state, corr_feats, params, cfg)
        preds.append(upsample_flow(state.flow, DOWNSAMPLE))
    return preds


# ---------------------------------------------------------------------------
# 2D -> 3D lifting


def lift_to_3d(
    flow2d: np.ndarray,
    depth1: np.ndarray,
    depth2: np.ndarray,
    intr: Intrinsics,
) -> tuple[np.ndarray, np.ndarray]:
    """Lift a 2-D flow field to 3-D scene flow via the two depth maps.

    The end point samples ``depth2`` bilinearly; a pixel is valid when its
    own depth is valid, the end point lands in frame, and every
    positively-weighted interpolation corner has valid depth. Returns
    (flow3d (3, H, W), valid (H, W) bool).
    """
    flow2d = np.asarray(flow2d, dtype=np.float64)
    depth1 = np.asarray(depth1, dtype=np.float64)
    depth2 = np.asarray(depth2, dtype=np.float64)
    if flow2d.ndim != 3 or flow2d.shape[0] != 2:
        raise ShapeError(f"flow2d must be (2, H, W), got {flow2d.shape}")
    h, w = depth1.shape
    if flow2d.shape[1:] != (h, w) or depth2.shape != (h, w):
        raise ShapeError("flow/depth extents disagree")

    xg, yg = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    v1 = np.isfinite(depth1) & (depth1 > 0)
    x2 = xg + flow2d[0]
    y2 = yg + flow2d[1]
    inb = (x2 >= 0) & (x2 <= w - 1) & (y2 >= 0) & (y2 <= h - 1)

    x2c = np.clip(x2, 0, w - 1.0)
    y2c = np.clip(y2, 0, h - 1.0)
    if w > 1:
        x0 = np.minimum(np.floor(x2c), w - 2).astype(np.intp)
        fx = x2c - x0
    else:
        x0 = np.zeros_like(x2c, dtype=np.intp)
        fx = np.zeros_like(x2c)
    if h > 1:
        y0 = np.minimum(np.floor(y2c), h - 2).astype(np.intp)
        fy = y2c - y0
    else:
        y0 = np.zeros_like(y2c, dtype=np.intp)
        fy = np.zeros_like(y2c)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    d2v = np.isfinite(depth2) & (depth2 > 0)
    d2 = np.where(d2v, depth2, 0.0)
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    z2 = w00 * d2[y0, x0] + w01 * d2[y0, x1] + w10 * d2[y1, x0] + w11 * d2[y1, x1]
    corners_ok = (
        ((w00 == 0) | d2v[y0, x0])
        & ((w01 == 0) | d2v[y0, x1])
        & ((w10 == 0) | d2v[y1, x0])
        & ((w11 == 0) | d2v[y1, x1])
    )

    valid = v1 & inb & corners_ok
    z1 = np.where(v1, depth1, 0.0)
    x1w, y1w, z1w = intr.backproject(xg, yg, z1)
    x2w, y2w, z2w = intr.backproject(x2, y2, z2)
    flow3d = np.stack([x2w - x1w, y2w - y1w, z2w - z1w])
    flow3d[:, ~valid] = 0.0
    return np.ascontiguousarray(flow3d), valid
