"""Synthetic RGB-D pair generation and photometric corruption protocols.

A sample is a static textured background plane plus a configurable number
of textured rectangles floating at distinct constant depths, each
translating by its own 2-D offset between the frames. Textures are
analytic sums of seeded sinusoids, so the second frame shows every
surface point with exactly the same color at its translated position and
local matching is well-posed. Ground-truth 2-D flow is the offset of the
surface visible at each pixel; 3-D flow follows from the pinhole model
with constant per-surface depth. The validity mask excludes exactly the
pixels whose frame-2 end point is occluded by a nearer surface or out of
frame.

Corruptions: additive Gaussian noise on the unit-range RGB values with a
standard deviation given on the 8-bit scale (clamped after the addition),
and a darkening that divides an image by one random integer factor drawn
from {1..9}. Both are deterministic functions of (input, parameters,
seed); both leave depth untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import DOWNSAMPLE
from .flow import Intrinsics

EXTENT_MULTIPLE = DOWNSAMPLE * 8  # leaves the coarsest lattice at least 2x2

BACKGROUND_DEPTH_FACTOR = 1.25  # background sits beyond every layer
MIN_DEPTH_GAP_FRACTION = 0.01  # of the configured depth span

DARK_FACTORS = range(1, 10)


# ---------------------------------------------------------------------------
# configuration and sample containers


@dataclass(frozen=True)
class SceneConfig:
    """Geometry and texture parameters for one generated frame pair."""

    height: int = 64
    width: int = 64
    n_layers: int = 3
    max_disp: float = 8.0
    depth_min: float = 2.0
    depth_max: float = 8.0
    fractional_offsets: bool = False
    waves: int = 4
    fx: float = 0.0  # 0 -> max(height, width)
    fy: float = 0.0
    cx: float = -1.0  # negative -> image center
    cy: float = -1.0

    def __post_init__(self):
        if self.height % EXTENT_MULTIPLE or self.width % EXTENT_MULTIPLE:
            raise ValueError(
                f"extent ({self.height}, {self.width}) must be a multiple of "
                f"{EXTENT_MULTIPLE}"
            )
        if self.n_layers < 0:
            raise ValueError("n_layers must be non-negative")
        if self.max_disp < 0:
            raise ValueError("max_disp must be non-negative")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("need 0 < depth_min < depth_max")
        if self.depth_max * BACKGROUND_DEPTH_FACTOR * 1000 > 65535:
            raise ValueError("depth_max too large for millimeter storage")
        if self.waves < 1:
            raise ValueError("waves must be positive")

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(
            fx=self.fx if self.fx > 0 else float(max(self.height, self.width)),
            fy=self.fy if self.fy > 0 else float(max(self.height, self.width)),
            cx=self.cx if self.cx >= 0 else (self.width - 1) / 2.0,
            cy=self.cy if self.cy >= 0 else (self.height - 1) / 2.0,
        )


@dataclass
class RgbdFrame:
    """One frame: unit-range color plus metric depth (0 marks invalid)."""

    rgb: np.ndarray  # (3, H, W), values in [0, 1]
    depth: np.ndarray  # (H, W), meters

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise ValueError(f"rgb must be (3, H, W), got {self.rgb.shape}")
        if self.depth.shape != self.rgb.shape[1:]:
            raise ValueError("rgb and depth extents disagree")
        if not np.all(np.isfinite(self.rgb)) or self.rgb.min() < 0 or self.rgb.max() > 1:
            raise ValueError("rgb must be finite and within [0, 1]")
        if not np.all(np.isfinite(self.depth)) or self.depth.min() < 0:
            raise ValueError("depth must be finite and non-negative")


@dataclass
class SamplePair:
    """Two frames with exact ground truth and a validity mask."""

    frame_t: RgbdFrame
    frame_t1: RgbdFrame
    gt_flow2d: np.ndarray  # (2, H, W), pixels
    gt_flow3d: np.ndarray  # (3, H, W), meters
    valid: np.ndarray  # (H, W), bool
    intrinsics: Intrinsics


@dataclass(frozen=True)
class CorruptionSpec:
    """Which corruption to apply and with what parameters."""

    kind: str = "none"  # "none" | "agn" | "dark"
    sigma: float = 35.0  # AGN standard deviation on the 0..255 scale
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "agn", "dark"):
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    def seeds_for_pair(self, index: int) -> tuple:
        """Independent sub-seeds for the two frames of pair ``index``."""
        return tuple(np.random.SeedSequence((self.seed, index)).spawn(2))

    def apply(self, rgb: np.ndarray, frame_seed) -> np.ndarray:
        if self.kind == "agn":
            return apply_agn(rgb, self.sigma, frame_seed)
        if self.kind == "dark":
            return apply_dark(rgb, frame_seed)
        return np.asarray(rgb, dtype=np.float64).copy()


# ---------------------------------------------------------------------------
# textures


@dataclass(frozen=True)
class Texture:
    """Per-channel base levels plus a bank of sinusoidal waves.

    Values stay inside (0, 1) by construction: each channel's wave
    amplitudes sum to at most 90% of its headroom.
    """

    bases: np.ndarray  # (3,)
    freqs: np.ndarray  # (3, K, 2) cycles per pixel
    phases: np.ndarray  # (3, K)
    amps: np.ndarray  # (3, K)

    def sample(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Evaluate at continuous scene coordinates; broadcasts over the
        common shape of ``xs`` and ``ys``."""
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        out = np.broadcast_to(
            self.bases.reshape(3, *([1] * xs.ndim)), (3,) + xs.shape
        ).copy()
        for c in range(3):
            for k in range(self.freqs.shape[1]):
                arg = 2 * np.pi * (
                    self.freqs[c, k, 0] * xs + self.freqs[c, k, 1] * ys
                )
                out[c] += self.amps[c, k] * np.sin(arg + self.phases[c, k])
        return out


def flat_texture(value: float = 0.5) -> Texture:
    return Texture(
        bases=np.full(3, float(value)),
        freqs=np.zeros((3, 0, 2)),
        phases=np.zeros((3, 0)),
        amps=np.zeros((3, 0)),
    )


def random_texture(rng: np.random.Generator, waves: int) -> Texture:
    bases = rng.uniform(0.35, 0.65, 3)
    rho = rng.uniform(1 / 16, 1 / 3, (3, waves))  # band limit in cycles/px
    theta = rng.uniform(0, 2 * np.pi, (3, waves))
    freqs = np.stack([rho * np.cos(theta), rho * np.sin(theta)], axis=-1)
    phases = rng.uniform(0, 2 * np.pi, (3, waves))
    amps = rng.uniform(0.5, 1.0, (3, waves))
    headroom = np.minimum(bases, 1 - bases)
    amps *= (0.9 * headroom / amps.sum(axis=1))[:, None]
    return Texture(bases=bases, freqs=freqs, phases=phases, amps=amps)


# ---------------------------------------------------------------------------
# scene composition


@dataclass(frozen=True)
class Layer:
    """A textured rectangle at constant depth, translating rigidly.

    ``x0``/``y0`` are the frame-1 top-left pixel coordinates; the frame-2
    footprint is the same rectangle shifted by ``offset`` (dx, dy).
    """

    x0: int
    y0: int
    width: int
    height: int
    depth: float
    offset: tuple[float, float]
    texture: Texture = field(default_factory=flat_texture)


def _covers(layer: Layer, qx: np.ndarray, qy: np.ndarray) -> np.ndarray:
    # Half-open footprint sampled at points; matches frame-2 rasterization.
    dx, dy = layer.offset
    return (
        (qx >= layer.x0 + dx)
        & (qx < layer.x0 + layer.width + dx)
        & (qy >= layer.y0 + dy)
        & (qy < layer.y0 + layer.height + dy)
    )


def compose_pair(
    background: Texture,
    bg_depth: float,
    layers: list[Layer],
    cfg: SceneConfig,
) -> SamplePair:
    """Rasterize both frames, exact flow, and the validity mask.

    The background never moves. Layers are drawn nearest-last, so at
    every pixel the visible surface is the nearest one covering it; the
    flow at a pixel is the visible surface's offset. A pixel is invalid
    exactly when its end point leaves the frame or is covered there by a
    strictly nearer surface.
    """
    h, w = cfg.height, cfg.width
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    by_depth = sorted(layers, key=lambda l: -l.depth)  # farthest first
    if len({l.depth for l in layers} | {bg_depth}) != len(layers) + 1:
        raise ValueError("surface depths must be distinct")
    for layer in layers:
        if layer.x0 < 0 or layer.y0 < 0 or layer.width < 1 or layer.height < 1:
            raise ValueError(f"layer footprint out of range: {layer}")
        if layer.depth <= 0:
            raise ValueError("layer depth must be positive")

    rgb1 = background.sample(xs, ys)
    depth1 = np.full((h, w), float(bg_depth))
    flow = np.zeros((2, h, w))
    rgb2 = background.sample(xs, ys)
    depth2 = np.full((h, w), float(bg_depth))

    for layer in by_depth:
        sel = slice(layer.y0, layer.y0 + layer.height), slice(
            layer.x0, layer.x0 + layer.width
        )
        rgb1[:, sel[0], sel[1]] = layer.texture.sample(xs[sel], ys[sel])
        depth1[sel] = layer.depth
        flow[0][sel] = layer.offset[0]
        flow[1][sel] = layer.offset[1]

        dx, dy = layer.offset
        # Pixel centers inside the shifted half-open footprint.
        xa = max(int(np.ceil(layer.x0 + dx)), 0)
        xb = min(int(np.ceil(layer.x0 + layer.width + dx)), w)
        ya = max(int(np.ceil(layer.y0 + dy)), 0)
        yb = min(int(np.ceil(layer.y0 + layer.height + dy)), h)
        if xa < xb and ya < yb:
            sel2 = slice(ya, yb), slice(xa, xb)
            # The surface point seen at frame-2 pixel p sat at p - offset.
            rgb2[:, sel2[0], sel2[1]] = layer.texture.sample(
                xs[sel2] - dx, ys[sel2] - dy
            )
            depth2[sel2] = layer.depth

    qx, qy = xs + flow[0], ys + flow[1]
    in_frame = (qx >= 0) & (qx <= w - 1) & (qy >= 0) & (qy <= h - 1)
    occluded = np.zeros((h, w), dtype=bool)
    for layer in layers:
        occluded |= _covers(layer, qx, qy) & (layer.depth < depth1)
    valid = in_frame & ~occluded

    intr = cfg.intrinsics()
    # In-plane translation at constant depth: the 3-D motion is the pixel
    # offset scaled by depth over focal length, with no depth change.
    flow3d = np.stack(
        [
            flow[0] * depth1 / intr.fx,
            flow[1] * depth1 / intr.fy,
            np.zeros((h, w)),
        ]
    )
    return SamplePair(
        frame_t=RgbdFrame(np.clip(rgb1, 0.0, 1.0), depth1),
        frame_t1=RgbdFrame(np.clip(rgb2, 0.0, 1.0), depth2),
        gt_flow2d=flow,
        gt_flow3d=flow3d,
        valid=valid,
        intrinsics=intr,
    )


def gen_synthetic(seed, cfg: SceneConfig) -> SamplePair:
    """Draw a layered scene deterministically from ``seed`` (an integer,
    an entropy tuple, or a prepared SeedSequence)."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.default_rng(seed)
    background = random_texture(rng, cfg.waves)
    bg_depth = cfg.depth_max * BACKGROUND_DEPTH_FACTOR

    min_gap = (cfg.depth_max - cfg.depth_min) * MIN_DEPTH_GAP_FRACTION
    for _ in range(1000):
        depths = rng.uniform(cfg.depth_min, cfg.depth_max, cfg.n_layers)
        gaps = np.diff(np.sort(depths))
        if cfg.n_layers < 2 or gaps.min() > min_gap:
            break
    else:  # pragma: no cover - needs a pathological configuration
        raise RuntimeError("could not draw distinct layer depths")

    layers = []
    for i in range(cfg.n_layers):
        lh = int(rng.integers(cfg.height // 4, cfg.height // 2 + 1))
        lw = int(rng.integers(cfg.width // 4, cfg.width // 2 + 1))
        y0 = int(rng.integers(0, cfg.height - lh + 1))
        x0 = int(rng.integers(0, cfg.width - lw + 1))
        if cfg.fractional_offsets:
            offset = tuple(rng.uniform(-cfg.max_disp, cfg.max_disp, 2))
        else:
            md = int(np.floor(cfg.max_disp))
            offset = tuple(float(v) for v in rng.integers(-md, md + 1, 2))
        layers.append(
            Layer(
                x0=x0,
                y0=y0,
                width=lw,
                height=lh,
                depth=float(depths[i]),
                offset=offset,
                texture=random_texture(rng, cfg.waves),
            )
        )
    return compose_pair(background, bg_depth, layers, cfg)


# ---------------------------------------------------------------------------
# corruption protocols


def _check_rgb(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if not np.all(np.isfinite(rgb)) or rgb.min() < 0 or rgb.max() > 1:
        raise ValueError("rgb must be finite and within [0, 1]")
    return rgb


def apply_agn(rgb, sigma: float, seed) -> np.ndarray:
    """Add zero-mean Gaussian noise with std ``sigma``/255, then clamp.

    The noise is exactly one ``normal(0, sigma / 255, rgb.shape)`` draw
    from ``np.random.default_rng(seed)``; statistical checks may rebuild
    it. ``sigma`` is given on the 8-bit scale. ``sigma == 0`` is the
    identity.
    """
    rgb = _check_rgb(rgb)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return rgb.copy()
    noise = np.random.default_rng(seed).normal(0.0, sigma / 255.0, rgb.shape)
    return np.clip(rgb + noise, 0.0, 1.0)


def draw_dark_factor(seed) -> int:
    """The darkening divisor: one integer uniform over {1..9}."""
    return int(np.random.default_rng(seed).integers(1, 10))


def apply_dark(rgb, seed) -> np.ndarray:
    """Divide the whole image by one seeded random factor from {1..9}.

    Never brightens: the factor is at least 1. A drawn factor of 1
    returns the input unchanged.
    """
    rgb = _check_rgb(rgb)
    return rgb / draw_dark_factor(seed)
