"""3-D Hilbert curve keys (Skilling's transpose construction), vectorized over points."""
from __future__ import annotations

import numpy as np

MAX_BITS = 16


def quantize(coords: np.ndarray, bits: int) -> np.ndarray:
    """Map coordinates onto the ``[0, 2**bits - 1]^3`` lattice of their bounding box.

    A zero-extent axis maps to 0.
    """
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in [1, {MAX_BITS}]")
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValueError("cannot quantize non-finite coordinates")
    top = (1 << bits) - 1
    lo = coords.min(axis=0)
    ext = coords.max(axis=0) - lo
    scale = np.where(ext > 0, (1 << bits) / np.where(ext > 0, ext, 1.0), 0.0)
    q = np.floor((coords - lo) * scale)
    return np.clip(q, 0, top).astype(np.int64)


def hilbert_index(lattice: np.ndarray, bits: int) -> np.ndarray:
    """Hilbert curve position of each lattice point, in ``[0, 8**bits)``.

    Accepts a single ``(3,)`` point or an ``(L, 3)`` array.
    """
    if not 1 <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in [1, {MAX_BITS}]")
    pts = np.asarray(lattice, dtype=np.int64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise ValueError("lattice points must have 3 coordinates")
    if np.any(pts < 0) or np.any(pts >= (1 << bits)):
        raise ValueError(f"lattice coordinate outside [0, {1 << bits})")
    x = [pts[:, 0].copy(), pts[:, 1].copy(), pts[:, 2].copy()]

    # axes -> transpose: undo excess work
    q = 1 << (bits - 1)
    while q > 1:
        p = q - 1
        for i in range(3):
            hit = (x[i] & q) != 0
            t = (x[0] ^ x[i]) & p
            x0_new = np.where(hit, x[0] ^ p, x[0] ^ t)
            if i != 0:
                x[i] = np.where(hit, x[i], x[i] ^ t)
            x[0] = x0_new
        q >>= 1
    # Gray encode
    x[1] ^= x[0]
    x[2] ^= x[1]
    t = np.zeros_like(x[0])
    q = 1 << (bits - 1)
    while q > 1:
        t = np.where((x[2] & q) != 0, t ^ (q - 1), t)
        q >>= 1
    for i in range(3):
        x[i] ^= t

    # interleave transpose bits, most significant first
    h = np.zeros_like(x[0])
    for b in range(bits - 1, -1, -1):
        for i in range(3):
            h = (h << 1) | ((x[i] >> b) & 1)
    return h[0] if single else h


AXIS_ORDERS = ("XYZ", "XZY", "YXZ", "YZX", "ZXY", "ZYX")
_AXIS = {"X": 0, "Y": 1, "Z": 2}


def axis_order_key(lattice: np.ndarray, order: str, bits: int) -> np.ndarray:
    """Lexicographic key on lattice coordinates, most significant axis first."""
    if order not in AXIS_ORDERS:
        raise ValueError(f"unknown axis order {order!r}")
    pts = np.atleast_2d(np.asarray(lattice, dtype=np.int64))
    a, b, c = (_AXIS[ch] for ch in order)
    key = (pts[:, a] << (2 * bits)) | (pts[:, b] << bits) | pts[:, c]
    return key[0] if np.ndim(lattice) == 1 else key


def curve_keys(coords: np.ndarray, curve: str, bits: int) -> np.ndarray:
    """Quantize ``coords`` and key them along ``curve`` ('hilbert' or an axis order)."""
    lattice = quantize(coords, bits)
    if curve.lower() == "hilbert":
        return hilbert_index(lattice, bits)
    return axis_order_key(lattice, curve.upper(), bits)
