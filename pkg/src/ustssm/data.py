"""Point-cloud videos: container, PCV1 binary I/O, normalization, synthetic actions."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PCV_MAGIC = b"PCV1"
PCV_VERSION = 1
_HEADER = struct.Struct("<4sIIIIi")

CLASS_NAMES = ("translate", "rotate_z", "breathe", "shake_x")


class PcvFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class PointCloudVideo:
    """``T`` frames of exactly ``N`` points; ``feats`` is optional ``T x N x C``."""

    coords: np.ndarray
    feats: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 3 or self.coords.shape[2] != 3:
            raise ValueError(f"coords must be T x N x 3, got {self.coords.shape}")
        if self.coords.shape[0] < 1 or self.coords.shape[1] < 1:
            raise ValueError("video needs at least one frame and one point")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")
        if self.feats is not None:
            self.feats = np.asarray(self.feats, dtype=np.float64)
            if self.feats.ndim != 3 or self.feats.shape[:2] != self.coords.shape[:2]:
                raise ValueError("feats must be T x N x C matching coords")

    @property
    def T(self) -> int:
        return self.coords.shape[0]

    @property
    def N(self) -> int:
        return self.coords.shape[1]

    @property
    def C(self) -> int:
        return 0 if self.feats is None else self.feats.shape[2]

    @classmethod
    def from_frames(cls, frames, feats=None, label=None) -> "PointCloudVideo":
        """Build from ragged per-frame arrays, cycling points to pad every frame to the max count."""
        n = max(len(f) for f in frames)

        def pad(a):
            a = np.asarray(a, dtype=np.float64)
            if len(a) == 0:
                raise ValueError("empty frame")
            return a[np.arange(n) % len(a)]

        coords = np.stack([pad(f) for f in frames])
        fe = None if feats is None else np.stack([pad(f) for f in feats])
        return cls(coords, fe, label)


def encode_pcv(video: PointCloudVideo) -> bytes:
    label = -1 if video.label is None else int(video.label)
    head = _HEADER.pack(PCV_MAGIC, PCV_VERSION, video.T, video.N, video.C, label)
    body = video.coords.astype("<f4").tobytes()
    if video.feats is not None:
        body += video.feats.astype("<f4").tobytes()
    return head + body


def decode_pcv(data: bytes) -> PointCloudVideo:
    if len(data) < _HEADER.size:
        raise PcvFormatError("truncated header", len(data))
    magic, version, t, n, c, label = _HEADER.unpack_from(data, 0)
    if magic != PCV_MAGIC:
        raise PcvFormatError(f"bad magic {magic!r}", 0)
    if version != PCV_VERSION:
        raise PcvFormatError(f"unsupported version {version}", 4)
    if t == 0:
        raise PcvFormatError("header T=0", 8)
    if n == 0:
        raise PcvFormatError("header N=0", 12)
    off = _HEADER.size
    n_coords, n_feats = t * n * 3, t * n * c
    need = off + 4 * (n_coords + n_feats)
    if len(data) < need:
        raise PcvFormatError(f"truncated payload: need {need} bytes, have {len(data)}", len(data))
    if len(data) > need:
        raise PcvFormatError("trailing bytes after payload", need)
    flat = np.frombuffer(data, dtype="<f4", count=n_coords + n_feats, offset=off)
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise PcvFormatError("non-finite value", off + 4 * int(bad[0]))
    coords = flat[:n_coords].astype(np.float64).reshape(t, n, 3)
    feats = flat[n_coords:].astype(np.float64).reshape(t, n, c) if c else None
    return PointCloudVideo(coords, feats, None if label < 0 else label)


def write_pcv(video: PointCloudVideo, path):
    """Write PCV1; coordinates and features are stored as float32."""
    Path(path).write_bytes(encode_pcv(video))


def read_pcv(path) -> PointCloudVideo:
    return decode_pcv(Path(path).read_bytes())


def write_dataset(videos, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, v in enumerate(videos):
        p = out / f"video_{i:05d}.pcv"
        write_pcv(v, p)
        paths.append(p)
    return paths


def read_dataset(data_dir) -> list:
    paths = sorted(Path(data_dir).glob("*.pcv"))
    if not paths:
        raise FileNotFoundError(f"no .pcv files in {data_dir}")
    return [read_pcv(p) for p in paths]


def normalize(video: PointCloudVideo) -> PointCloudVideo:
    """Center on the whole-video centroid and scale so the farthest point has radius 1.

    One scale for all frames keeps motion magnitudes comparable.
    """
    pts = video.coords.reshape(-1, 3)
    # identical points: the rounded mean would leave a tiny residue that the scale step blows up
    centroid = pts[0] if np.all(pts == pts[0]) else pts.mean(axis=0)
    centered = video.coords - centroid
    radius = np.sqrt((centered * centered).sum(axis=-1)).max()
    if radius > 0:
        centered = centered / radius
    return PointCloudVideo(centered, video.feats, video.label)


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 4
    videos_per_class: int = 64
    T: int = 16
    N: int = 256
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_classes must be in [1, {len(CLASS_NAMES)}]")
        if min(self.videos_per_class, self.T, self.N) < 1:
            raise ValueError("videos_per_class, T and N must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def synth_video(label: int, T: int, N: int, noise_sigma: float, rng) -> PointCloudVideo:
    """One synthetic action clip: an anisotropic Gaussian blob moved by the class motion."""
    blob = rng.normal(size=(N, 3)) * np.array([0.35, 0.2, 0.12])
    blob = blob @ _random_rotation(rng).T
    blob -= blob.mean(axis=0)
    t = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    frames = np.empty((T, N, 3))
    if label == 0:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        c0 = rng.uniform(-0.5, 0.5, size=3)
        speed = rng.uniform(0.8, 1.2)
        for f in range(T):
            frames[f] = blob + c0 + speed * t[f] * d
    elif label == 1:
        az = rng.uniform(0, 2 * np.pi)
        r0 = rng.uniform(0.6, 1.0)
        c0 = np.array([r0 * np.cos(az), r0 * np.sin(az), rng.uniform(-0.3, 0.3)])
        omega = rng.uniform(0.5 * np.pi, np.pi) * rng.choice([-1.0, 1.0])
        for f in range(T):
            frames[f] = (blob + c0) @ _rot_z(omega * t[f]).T
    elif label == 2:
        c0 = rng.uniform(-0.5, 0.5, size=3)
        amp = rng.uniform(0.3, 0.5)
        phase = rng.uniform(0, 2 * np.pi)
        for f in range(T):
            frames[f] = c0 + blob * (1.0 + amp * np.sin(2 * np.pi * t[f] + phase))
    elif label == 3:
        c0 = rng.uniform(-0.5, 0.5, size=3)
        amp = rng.uniform(0.25, 0.4)
        cycles = rng.uniform(3.0, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        for f in range(T):
            frames[f] = blob + c0
            frames[f, :, 0] += amp * np.sin(2 * np.pi * cycles * t[f] + phase)
    else:
        raise ValueError(f"unknown class {label}")
    if noise_sigma > 0:
        frames = frames + rng.normal(scale=noise_sigma, size=frames.shape)
    return PointCloudVideo(frames, None, label)


def synth_generate(cfg: SynthConfig) -> list:
    """Balanced synthetic dataset, ordered class-major; deterministic per ``cfg.seed``."""
    videos = []
    for label in range(cfg.n_classes):
        for i in range(cfg.videos_per_class):
            rng = np.random.default_rng([cfg.seed, label, i])
            videos.append(synth_video(label, cfg.T, cfg.N, cfg.noise_sigma, rng))
    return videos


def split_dataset(videos, val_fraction: float = 0.25, seed: int = 0) -> tuple:
    """Stratified train/held-out split (per-label shuffles, deterministic per seed)."""
    rng = np.random.default_rng(seed)
    labels = np.array([v.label for v in videos])
    train_idx, val_idx = [], []
    for lab in np.unique(labels):
        idx = np.flatnonzero(labels == lab)
        idx = idx[rng.permutation(len(idx))]
        n_val = int(round(val_fraction * len(idx)))
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return [videos[i] for i in sorted(train_idx)], [videos[i] for i in sorted(val_idx)]


# ---------------------------------------------------------------- visualization payloads

_PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212],
    [0, 128, 128], [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0],
    [170, 255, 195],
])


@dataclass
class VizPoints:
    """Per-point visualization payload in serialized (or any fixed) order."""

    coords: np.ndarray
    point: np.ndarray
    frame: np.ndarray
    cluster: np.ndarray
    weight: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.weight is None:
            self.weight = np.zeros(len(self.point))


def write_viz_csv(path, viz: VizPoints, columns=("point", "frame", "cluster", "weight")):
    names = {"point": "point", "frame": "frame", "cluster": "cluster_id", "weight": "weight"}
    lines = [",".join(names[c] for c in columns)]
    for i in range(len(viz.point)):
        row = []
        for c in columns:
            v = getattr(viz, c)[i]
            row.append(repr(float(v)) if c == "weight" else str(int(v)))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_viz_ply(path, viz: VizPoints):
    """ASCII PLY whose vertex colour indexes the cluster id."""
    n = len(viz.point)
    head = [
        "ply", "format ascii 1.0", f"element vertex {n}",
        "property float x", "property float y", "property float z",
        "property int frame", "property int cluster", "property float weight",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    rows = []
    for i in range(n):
        r, g, b = _PALETTE[int(viz.cluster[i]) % len(_PALETTE)]
        x, y, z = viz.coords[i]
        rows.append(f"{x:.6f} {y:.6f} {z:.6f} {int(viz.frame[i])} {int(viz.cluster[i])} "
                    f"{float(viz.weight[i]):.6f} {r} {g} {b}")
    Path(path).write_text("\n".join(head + rows) + "\n")
