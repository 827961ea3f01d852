"""Per-keypoint probability maps: rendering, peak extraction, sampling.

A map stack holds one channel per keypoint type on a fixed grid. Cell
(row j, col i) is centered at continuous coordinates (x=i, y=j), so
projected positions index the grid directly. Values live in [0, 1].

File format (.kpm, little-endian): magic "KPM1", u32 channel count,
u32 width, u32 height, f32 sigma, then channel-major row-major f32
payload.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

KPM_MAGIC = b"KPM1"
_HEADER = struct.Struct("<4sIIIf")
TRUNCATION_SIGMAS = 4.0


class MapFormatError(ValueError):
    """Raised for malformed .kpm payloads."""


@dataclass
class KeypointMapStack:
    """(N_k, H, W) float32 channels plus the lobe width they were built with."""

    channels: np.ndarray
    sigma: float

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=np.float32)
        if self.channels.ndim != 3:
            raise ValueError("channels must have shape (N_k, H, W)")
        # Round-trips through the f32 header field must be exact.
        self.sigma = float(np.float32(self.sigma))

    @property
    def n_types(self) -> int:
        return self.channels.shape[0]

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]


@dataclass
class KeypointLocations:
    """Per-type detected peak positions (M_i, 2) and their map values (M_i,)."""

    positions: list
    peaks: list

    @property
    def n_types(self) -> int:
        return len(self.positions)

    def total(self) -> int:
        return sum(len(p) for p in self.positions)


def render_maps(locations, sigma: float, width: int, height: int) -> KeypointMapStack:
    """Render unnormalized Gaussian lobes, composed by maximum.

    locations: per-type sequences of (x, y) cell coordinates. Lobes are
    truncated at 4 sigma; overlapping lobes take the pointwise max, so
    values never exceed 1. Off-grid locations contribute whatever part
    of their lobe lands on the grid.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    stack = np.zeros((len(locations), height, width), dtype=np.float64)
    radius = TRUNCATION_SIGMAS * sigma
    inv = 1.0 / (2.0 * sigma * sigma)
    for ch, locs in enumerate(locations):
        for loc in np.atleast_2d(np.asarray(locs, dtype=float)) if len(locs) else []:
            x, y = float(loc[0]), float(loc[1])
            x0 = max(0, int(math.ceil(x - radius)))
            x1 = min(width - 1, int(math.floor(x + radius)))
            y0 = max(0, int(math.ceil(y - radius)))
            y1 = min(height - 1, int(math.floor(y + radius)))
            if x0 > x1 or y0 > y1:
                continue
            xs = np.arange(x0, x1 + 1, dtype=float) - x
            ys = np.arange(y0, y1 + 1, dtype=float) - y
            d2 = ys[:, None] ** 2 + xs[None, :] ** 2
            lobe = np.where(d2 <= radius * radius, np.exp(-d2 * inv), 0.0)
            patch = stack[ch, y0:y1 + 1, x0:x1 + 1]
            np.maximum(patch, lobe, out=patch)
    return KeypointMapStack(stack, sigma)


def extract_locations(stack: KeypointMapStack, tau_m: float) -> KeypointLocations:
    """Find per-channel local maxima above tau_m.

    A cell qualifies when its value exceeds tau_m and is >= all eight
    neighbors (missing neighbors ignored). Connected plateaus of equal
    value emit only their lexicographically smallest (row, col) cell.
    Returned positions are cell centers in (x, y) order.
    """
    positions, peaks = [], []
    for ch in range(stack.n_types):
        v = stack.channels[ch].astype(np.float64)
        h, w = v.shape
        padded = np.full((h + 2, w + 2), -np.inf)
        padded[1:-1, 1:-1] = v
        is_max = v > tau_m
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                is_max &= v >= padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        cand = {(int(r), int(c)) for r, c in zip(*np.nonzero(is_max))}
        kept = []
        seen = set()
        for cell in sorted(cand):
            if cell in seen:
                continue
            # Flood the equal-valued plateau this candidate belongs to.
            group = [cell]
            seen.add(cell)
            queue = [cell]
            val = v[cell]
            while queue:
                r, c = queue.pop()
                for dr in (-1, 0, 1):
                    for dc in (-1, 0, 1):
                        nb = (r + dr, c + dc)
                        if nb in cand and nb not in seen and v[nb] == val:
                            seen.add(nb)
                            group.append(nb)
                            queue.append(nb)
            kept.append(min(group))
        kept.sort()
        positions.append(np.array([[c, r] for r, c in kept], dtype=float).reshape(len(kept), 2))
        peaks.append(np.array([v[cell] for cell in kept], dtype=float))
    return KeypointLocations(positions, peaks)


def sample(stack: KeypointMapStack, type_index: int, position) -> float:
    """Bilinear map value at a continuous position; 0 beyond the grid.

    Cells outside the grid act as zeros, so the surface decays linearly
    to zero across a one-cell band around the border and is continuous
    everywhere.
    """
    val, _ = _sample_batch(stack.channels, np.array([type_index]),
                           np.asarray(position, dtype=float).reshape(1, 2))
    return float(val[0])


def sample_with_grad(stack: KeypointMapStack, type_index: int, position):
    """Bilinear value and its (d/dx, d/dy) gradient at a position."""
    val, grad = _sample_batch(stack.channels, np.array([type_index]),
                              np.asarray(position, dtype=float).reshape(1, 2))
    return float(val[0]), grad[0]


def _sample_batch(channels: np.ndarray, types: np.ndarray, positions: np.ndarray):
    """Vectorized bilinear sampling.

    types (...,) int, positions (..., 2) float. Returns values (...,)
    and gradients (..., 2) in cell units.
    """
    h, w = channels.shape[1], channels.shape[2]
    x = positions[..., 0]
    y = positions[..., 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0i = x0.astype(np.int64)
    y0i = y0.astype(np.int64)

    def corner(dx, dy):
        xi = x0i + dx
        yi = y0i + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        vals = channels[types, np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)].astype(np.float64)
        return np.where(ok, vals, 0.0)

    v00 = corner(0, 0)
    v10 = corner(1, 0)
    v01 = corner(0, 1)
    v11 = corner(1, 1)
    value = ((1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v10
             + (1 - fx) * fy * v01 + fx * fy * v11)
    gx = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
    gy = (1 - fx) * (v01 - v00) + fx * (v11 - v10)
    return value, np.stack([gx, gy], axis=-1)


def occlude(per_object_keypoints, drop_fraction: float, seed: int):
    """Remove a random subset of each object's keypoints before rendering.

    per_object_keypoints: list over objects of lists of
    (type_index, position) entries. Per object, ceil(drop_fraction * n)
    of its n keypoints are dropped uniformly at random; deterministic
    for a given seed.
    """
    if not (0.0 <= drop_fraction <= 1.0):
        raise ValueError("drop_fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    out = []
    for entries in per_object_keypoints:
        n = len(entries)
        n_drop = int(math.ceil(drop_fraction * n))
        dropped = set(rng.choice(n, size=n_drop, replace=False).tolist()) if n_drop else set()
        out.append([e for i, e in enumerate(entries) if i not in dropped])
    return out


def flatten_locations(per_object_keypoints, n_types: int):
    """Group per-object (type, position) entries into per-type arrays."""
    buckets = [[] for _ in range(n_types)]
    for entries in per_object_keypoints:
        for t, pos in entries:
            buckets[int(t)].append(np.asarray(pos, dtype=float))
    return [np.array(b, dtype=float).reshape(len(b), 2) for b in buckets]


def write_kpm(stack: KeypointMapStack, path):
    data = _HEADER.pack(KPM_MAGIC, stack.n_types, stack.width, stack.height, stack.sigma)
    payload = np.ascontiguousarray(stack.channels, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(data)
        fh.write(payload)


def read_kpm(path) -> KeypointMapStack:
    with open(path, "rb") as fh:
        raw = fh.read()
    return kpm_from_bytes(raw)


def kpm_from_bytes(raw: bytes) -> KeypointMapStack:
    if len(raw) < _HEADER.size:
        raise MapFormatError("truncated header")
    magic, n, w, h, sigma = _HEADER.unpack_from(raw)
    if magic != KPM_MAGIC:
        raise MapFormatError(f"bad magic {magic!r}")
    expected = _HEADER.size + 4 * n * w * h
    if len(raw) != expected:
        raise MapFormatError(f"payload size {len(raw)} != expected {expected}")
    channels = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, h, w).copy()
    return KeypointMapStack(channels, sigma)


def kpm_to_bytes(stack: KeypointMapStack) -> bytes:
    head = _HEADER.pack(KPM_MAGIC, stack.n_types, stack.width, stack.height, stack.sigma)
    return head + np.ascontiguousarray(stack.channels, dtype="<f4").tobytes()
