"""Bit-exact readers and writers for every on-disk artifact.

Formats covered: Middlebury ``.flo`` 2-D flow, binary PPM (P6) for RGB,
16-bit big-endian PGM (P5) for depth in millimeters, 8-bit PGM for
validity masks, a planar float32 container for 3-D flow, a flat binary
checkpoint for parameter dictionaries, tab-separated dataset manifests,
and flat ``key=value`` run configs.

Every reader validates structure before producing data and raises
:class:`FormatError` on anything malformed: wrong magic, truncated
payload, trailing bytes, or inconsistent dimensions. Writers are
deterministic byte-for-byte given equal inputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields

import numpy as np

FLO_MAGIC = 202021.25  # stored as little-endian float32; reads as "PIEH"
FLOW3D_MAGIC = b"FL3D"
CHECKPOINT_MAGIC = b"ckpt v1\n"

DEPTH_UNITS_PER_METER = 1000.0  # depth PGMs store integer millimeters
DEPTH_MAX_UNITS = 65535

# Decimal literals such as 1.2345 land a hair below their true value in
# binary, so a bare floor(x + 0.5) would round the intended half cases
# down. The slack is ~1e-7 of one quantum: far below every stated
# round-trip bound, large enough to absorb float64 representation error.
_HALF_UP_SLACK = 1e-7


class FormatError(ValueError):
    """A file failed structural validation while being read."""


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write_bytes(path, payload: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(payload)


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5 + _HALF_UP_SLACK)


# ---------------------------------------------------------------------------
# Middlebury .flo


def write_flo(path, flow2d) -> None:
    """Write a (2, H, W) flow field: magic, int32 width/height, then
    row-major interleaved (u, v) float32 pairs, all little-endian."""
    flow2d = np.asarray(flow2d, dtype=np.float64)
    if flow2d.ndim != 3 or flow2d.shape[0] != 2:
        raise ValueError(f"flow must be (2, H, W), got {flow2d.shape}")
    if not np.all(np.isfinite(flow2d)):
        raise ValueError("flow contains non-finite values")
    _, h, w = flow2d.shape
    head = np.array([FLO_MAGIC], dtype="<f4").tobytes()
    head += np.array([w, h], dtype="<i4").tobytes()
    interleaved = np.ascontiguousarray(
        np.moveaxis(flow2d, 0, -1), dtype="<f4"
    )  # (H, W, 2): u then v per pixel
    _write_bytes(path, head + interleaved.tobytes())


def read_flo(path) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    magic = np.frombuffer(buf[:4], dtype="<f4")[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    w, h = (int(v) for v in np.frombuffer(buf[4:12], dtype="<i4"))
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive extent ({w}, {h})")
    expect = 12 + 8 * w * h
    if len(buf) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, found {len(buf)}")
    data = np.frombuffer(buf[12:], dtype="<f4").reshape(h, w, 2)
    return np.moveaxis(data, -1, 0).astype(np.float64)


# ---------------------------------------------------------------------------
# PNM (PPM / PGM) helpers


def _pnm_header(magic: bytes, w: int, h: int, maxval: int) -> bytes:
    return b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)


def _parse_pnm(buf: bytes, path, magic: bytes, maxval: int, bpp: int):
    """Validate ``magic``/extent/maxval and return (w, h, payload)."""
    if buf[:2] != magic:
        raise FormatError(f"{path}: bad magic {buf[:2]!r}, expected {magic!r}")
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise FormatError(f"{path}: malformed header near byte {pos}")
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{path}: header not terminated by whitespace")
    pos += 1  # exactly one whitespace byte separates header and payload
    w, h, found_max = values
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive extent ({w}, {h})")
    if found_max != maxval:
        raise FormatError(f"{path}: maxval {found_max}, expected {maxval}")
    payload = buf[pos:]
    if len(payload) != w * h * bpp:
        raise FormatError(
            f"{path}: expected {w * h * bpp} payload bytes, found {len(payload)}"
        )
    return w, h, payload


def write_rgb_ppm(path, rgb) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary PPM, one byte
    per channel, rounding half up."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ValueError(f"rgb must be (3, H, W), got {rgb.shape}")
    if not np.all(np.isfinite(rgb)) or rgb.min() < 0 or rgb.max() > 1:
        raise ValueError("rgb values must be finite and within [0, 1]")
    _, h, w = rgb.shape
    quantized = _round_half_up(rgb * 255.0).astype(np.uint8)
    payload = np.ascontiguousarray(np.moveaxis(quantized, 0, -1)).tobytes()
    _write_bytes(path, _pnm_header(b"P6", w, h, 255) + payload)


def read_rgb_ppm(path) -> np.ndarray:
    buf = _read_bytes(path)
    w, h, payload = _parse_pnm(buf, path, b"P6", 255, 3)
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return np.moveaxis(data, -1, 0).astype(np.float64) / 255.0


def write_depth_pgm(path, depth_m) -> None:
    """Write an (H, W) depth map in meters as 16-bit big-endian PGM of
    integer millimeters (round half up); zero means invalid."""
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if depth_m.ndim != 2:
        raise ValueError(f"depth must be (H, W), got {depth_m.shape}")
    if not np.all(np.isfinite(depth_m)) or depth_m.min() < 0:
        raise ValueError("depth values must be finite and non-negative")
    mm = _round_half_up(depth_m * DEPTH_UNITS_PER_METER)
    if mm.max() > DEPTH_MAX_UNITS:
        raise ValueError(
            f"depth exceeds {DEPTH_MAX_UNITS / DEPTH_UNITS_PER_METER} m range"
        )
    h, w = depth_m.shape
    payload = mm.astype(">u2").tobytes()
    _write_bytes(path, _pnm_header(b"P5", w, h, DEPTH_MAX_UNITS) + payload)


def read_depth_pgm(path) -> np.ndarray:
    buf = _read_bytes(path)
    w, h, payload = _parse_pnm(buf, path, b"P5", DEPTH_MAX_UNITS, 2)
    mm = np.frombuffer(payload, dtype=">u2").reshape(h, w)
    return mm.astype(np.float64) / DEPTH_UNITS_PER_METER


def write_mask_pgm(path, mask) -> None:
    """Write an (H, W) boolean validity mask as 8-bit PGM (0 or 255)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be (H, W), got {mask.shape}")
    h, w = mask.shape
    payload = np.where(mask.astype(bool), 255, 0).astype(np.uint8).tobytes()
    _write_bytes(path, _pnm_header(b"P5", w, h, 255) + payload)


def read_mask_pgm(path) -> np.ndarray:
    buf = _read_bytes(path)
    w, h, payload = _parse_pnm(buf, path, b"P5", 255, 1)
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w) > 0


# ---------------------------------------------------------------------------
# planar float32 3-D flow


def write_flow3d(path, flow3d) -> None:
    """Write a (3, H, W) scene-flow field: 4-byte magic, int32
    width/height, then three planar float32 little-endian planes in
    x, y, z order."""
    flow3d = np.asarray(flow3d, dtype=np.float64)
    if flow3d.ndim != 3 or flow3d.shape[0] != 3:
        raise ValueError(f"flow3d must be (3, H, W), got {flow3d.shape}")
    if not np.all(np.isfinite(flow3d)):
        raise ValueError("flow3d contains non-finite values")
    _, h, w = flow3d.shape
    head = FLOW3D_MAGIC + np.array([w, h], dtype="<i4").tobytes()
    _write_bytes(path, head + np.ascontiguousarray(flow3d, dtype="<f4").tobytes())


def read_flow3d(path) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    if buf[:4] != FLOW3D_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    w, h = (int(v) for v in np.frombuffer(buf[4:12], dtype="<i4"))
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: non-positive extent ({w}, {h})")
    expect = 12 + 12 * w * h
    if len(buf) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, found {len(buf)}")
    return np.frombuffer(buf[12:], dtype="<f4").reshape(3, h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# parameter checkpoints


def write_checkpoint(path, params: dict, meta: dict | None = None) -> None:
    """Write a flat ``path -> float64 array`` dictionary.

    Layout: an ASCII preamble (magic line, ``meta k=v`` lines, one
    ``tensor <path> <d0>x<d1>...`` line per entry, a ``payload`` line),
    then the raw little-endian float64 payloads concatenated in the
    listed order. Keys are sorted so equal dictionaries produce
    byte-identical files.
    """
    meta = dict(meta or {})
    lines = [CHECKPOINT_MAGIC]
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in key or "\n" in value:
            raise ValueError(f"meta entry {key!r} not single-line")
        if "=" in key:
            raise ValueError(f"meta key {key!r} contains '='")
        lines.append(f"meta {key}={value}\n".encode())
    arrays = []
    for key in sorted(params):
        arr = np.asarray(
            params[key].data if hasattr(params[key], "data") else params[key],
            dtype=np.float64,
        )
        if " " in key or "\n" in key:
            raise ValueError(f"parameter path {key!r} contains whitespace")
        dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "0"
        lines.append(f"tensor {key} {dims}\n".encode())
        arrays.append(np.ascontiguousarray(arr, dtype="<f8"))
    lines.append(b"payload\n")
    _write_bytes(path, b"".join(lines) + b"".join(a.tobytes() for a in arrays))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    buf = _read_bytes(path)
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: bad magic {buf[:8]!r}")
    pos = len(CHECKPOINT_MAGIC)
    meta: dict[str, str] = {}
    shapes: list[tuple[str, tuple[int, ...]]] = []
    while True:
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: preamble not terminated")
        line = buf[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        if line == "payload":
            break
        if line.startswith("meta "):
            body = line[5:]
            if "=" not in body:
                raise FormatError(f"{path}: malformed meta line {line!r}")
            key, _, value = body.partition("=")
            meta[key] = value
        elif line.startswith("tensor "):
            parts = line.split(" ")
            if len(parts) != 3:
                raise FormatError(f"{path}: malformed tensor line {line!r}")
            try:
                shape = tuple(int(d) for d in parts[2].split("x"))
            except ValueError:
                raise FormatError(f"{path}: bad shape in line {line!r}") from None
            if any(d <= 0 for d in shape):
                raise FormatError(f"{path}: non-positive dim in line {line!r}")
            shapes.append((parts[1], shape))
        else:
            raise FormatError(f"{path}: unexpected preamble line {line!r}")
    total = sum(int(np.prod(s)) for _, s in shapes)
    if len(buf) - pos != 8 * total:
        raise FormatError(
            f"{path}: expected {8 * total} payload bytes, found {len(buf) - pos}"
        )
    params: dict[str, np.ndarray] = {}
    for key, shape in shapes:
        if key in params:
            raise FormatError(f"{path}: duplicate tensor path {key!r}")
        n = int(np.prod(shape))
        params[key] = (
            np.frombuffer(buf[pos : pos + 8 * n], dtype="<f8")
            .reshape(shape)
            .astype(np.float64)
        )
        pos += 8 * n
    return params, meta


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass(frozen=True)
class SampleFiles:
    """Relative paths of the seven artifacts describing one frame pair."""

    rgb1: str
    depth1: str
    rgb2: str
    depth2: str
    flow2d: str
    flow3d: str
    mask: str

    def resolve(self, base) -> "SampleFiles":
        return SampleFiles(
            *(os.path.join(base, getattr(self, f.name)) for f in fields(self))
        )

    def as_tuple(self) -> tuple[str, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


MANIFEST_COLUMNS = tuple(f.name for f in fields(SampleFiles))


def write_manifest(path, entries) -> None:
    lines = []
    for entry in entries:
        parts = entry.as_tuple()
        if any("\t" in p or "\n" in p for p in parts):
            raise ValueError(f"manifest path contains separator: {parts}")
        lines.append("\t".join(parts) + "\n")
    _write_bytes(path, "".join(lines).encode())


def read_manifest(path) -> list[SampleFiles]:
    entries = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != len(MANIFEST_COLUMNS):
                raise FormatError(
                    f"{path}: line {lineno}: expected "
                    f"{len(MANIFEST_COLUMNS)} tab-separated paths, got {len(parts)}"
                )
            entries.append(SampleFiles(*parts))
    return entries


# ---------------------------------------------------------------------------
# flat key=value run configs


def write_kv_config(path, mapping: dict) -> None:
    """Write a flat config, one sorted ``key=value`` line per entry."""
    lines = []
    for key in sorted(mapping):
        value = str(mapping[key])
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"config entry {key!r} not representable")
        lines.append(f"{key}={value}\n")
    _write_bytes(path, "".join(lines).encode())


def read_kv_config(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}: line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            if not key or key in out:
                raise FormatError(f"{path}: line {lineno}: bad or duplicate key")
            out[key] = value
    return out
