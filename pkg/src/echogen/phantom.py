"""Procedural ultrasound phantom images.

Each image is multiplicative Rayleigh speckle over a layered depth-gain
profile (bright skin band, dimmer fat, brighter glandular tissue, dim
muscle), 3x3 box smoothed, log-compressed, and normalized per image.
Lesions are hypoechoic: benign a smooth-edged ellipse, malignant a star
polygon with strong radial jitter.  A fraction of images carry thin bright
measurement-line artifacts.  Everything derives from the portable RNG, so
generation is bit-reproducible per seed.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng

SIZE = 64
CLASS_NAMES = ("normal", "benign", "malignant")

# log-compression strength; higher flattens bright speckle more
_COMPRESSION = 18.0
# multiplicative gain inside lesions (hypoechoic)
_LESION_GAIN = (0.06, 0.16)
_MEASUREMENT_LINE_FRACTION = 0.10


def _box3(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += padded[di:di + img.shape[0], dj:dj + img.shape[1]]
    return out / 9.0


def _depth_gain_profile(rng: Rng, size: int) -> np.ndarray:
    """Row-gain curve for skin / fat / gland / muscle strata."""
    skin_end = 3 + int(rng.integers(0, 3))
    fat_end = skin_end + 12 + int(rng.integers(-3, 4))
    gland_end = fat_end + 26 + int(rng.integers(-4, 5))
    muscle_end = min(size - 2, gland_end + 12 + int(rng.integers(-2, 3)))
    gains = np.empty(size)
    gains[:skin_end] = 1.8
    gains[skin_end:fat_end] = 0.55
    gains[fat_end:gland_end] = 1.0
    gains[gland_end:muscle_end] = 0.5
    gains[muscle_end:] = 0.32
    # soften the band edges
    kernel = np.ones(5) / 5.0
    gains = np.convolve(np.pad(gains, 2, mode="edge"), kernel, mode="valid")
    return gains


def _ellipse_mask(rng: Rng, size: int) -> np.ndarray:
    a = 5.0 + 6.0 * rng.uniform()
    b = 5.0 + 6.0 * rng.uniform()
    margin = max(a, b) + 2.0
    cy = rng.uniform() * (44 - 24) + 24
    cx = margin + rng.uniform() * (size - 2 * margin)
    theta = rng.uniform() * np.pi
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float32)


def _star_mask(rng: Rng, size: int) -> np.ndarray:
    """Star-shaped polygon in polar form: radius interpolated between jittered vertices."""
    n_vertices = int(rng.integers(8, 17))
    base_r = 6.0 + 5.0 * rng.uniform()
    # radial jitter of at least 25%: alternate inward/outward spikes
    jitter = 0.25 + 0.2 * rng.uniform((n_vertices,))
    signs = np.where(np.arange(n_vertices) % 2 == 0, 1.0, -1.0)
    radii = base_r * (1.0 + signs * jitter)
    margin = radii.max() + 2.0
    cy = rng.uniform() * (44 - 24) + 24
    cx = margin + rng.uniform() * (size - 2 * margin)
    phase = rng.uniform() * 2 * np.pi

    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dx, dy)
    ang = (np.arctan2(dy, dx) - phase) % (2 * np.pi)
    # piecewise-linear radius over vertex angles
    pos = ang / (2 * np.pi) * n_vertices
    i0 = np.floor(pos).astype(int) % n_vertices
    i1 = (i0 + 1) % n_vertices
    frac = pos - np.floor(pos)
    r_theta = radii[i0] * (1 - frac) + radii[i1] * frac
    return (dist <= r_theta).astype(np.float32)


def _feather(mask: np.ndarray) -> np.ndarray:
    # smooth gain transition at the lesion boundary (mask itself stays exact)
    return _box3(_box3(mask))


def _add_measurement_lines(rng: Rng, img: np.ndarray) -> None:
    for _ in range(1 + int(rng.integers(0, 2))):
        length = int(rng.integers(8, 22))
        r = int(rng.integers(4, SIZE - 5))
        c = int(rng.integers(2, SIZE - length - 2))
        if rng.uniform() < 0.5:
            img[r, c:c + length] = 0.97
        else:
            img[c:c + length, r] = 0.97


def render_phantom(class_id: int, rng: Rng, size: int = SIZE) -> tuple[np.ndarray, np.ndarray]:
    """One (image, mask) pair; image in [-1, 1], mask exact binary support."""
    if class_id == 0:
        mask = np.zeros((size, size), dtype=np.float32)
    elif class_id == 1:
        mask = _ellipse_mask(rng, size)
    elif class_id == 2:
        mask = _star_mask(rng, size)
    else:
        raise ValueError(f"unknown class id {class_id}")

    gains = np.tile(_depth_gain_profile(rng, size)[:, None], (1, size))
    tilt = (rng.uniform() - 0.5) * 0.25
    gains = gains * (1.0 + tilt * (np.arange(size) - size / 2)[None, :] / size)

    if class_id != 0:
        lesion_gain = _LESION_GAIN[0] + (_LESION_GAIN[1] - _LESION_GAIN[0]) * rng.uniform()
        gains = gains * (1.0 - (1.0 - lesion_gain) * _feather(mask))

    u = rng.uniform((size, size))
    rayleigh = np.sqrt(-2.0 * np.log(1.0 - u))
    envelope = _box3(gains * rayleigh)
    compressed = np.log1p(_COMPRESSION * envelope)
    ref = np.percentile(compressed, 99.5)
    img = np.clip(compressed / max(ref, 1e-6), 0.0, 1.0)

    if rng.uniform() < _MEASUREMENT_LINE_FRACTION:
        _add_measurement_lines(rng, img)

    return (img * 2.0 - 1.0).astype(np.float32), mask
