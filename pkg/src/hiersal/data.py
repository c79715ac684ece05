"""Dataset plumbing: synthetic video generation, on-disk layout, clip loading.

Dataset tree layout::

    root/
      dataset.txt                  # generation parameters, informational
      videos/<video_id>/frames/000000.pgm ...
      videos/<video_id>/gt/000000.pgm ...
      videos/<video_id>/fixations.txt    # lines: "<frame_idx> <x> <y>"

Frames and ground-truth densities are binary 8-bit PGM (P5); densities are
stored peak-scaled and renormalized to sum 1 at load time. Frame indices on
disk are 0-based; clip-protocol time indices (``t``) are 1-based.
"""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError, InputError

# ---------------------------------------------------------------------------
# portable graymap / pixmap


def write_pgm(path, arr):
    arr = np.asarray(arr)
    if arr.dtype != np.uint8 or arr.ndim != 2:
        raise ValueError("write_pgm expects a 2D uint8 array")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(arr.tobytes())


def _read_header_tokens(f, n):
    tokens = []
    while len(tokens) < n:
        line = f.readline()
        if not line:
            raise IngestionError(f"truncated PNM header in {f.name}")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def read_pnm(path):
    """Read a binary PGM (P5) as [H,W] uint8 or PPM (P6) as [H,W,3] uint8."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"missing image file: {path}")
    with open(path, "rb") as f:
        magic = f.readline().split(b"#", 1)[0].strip()
        if magic not in (b"P5", b"P6"):
            raise IngestionError(f"unsupported PNM magic {magic!r} in {path}")
        w, h, maxval = (int(t) for t in _read_header_tokens(f, 3))
        if maxval != 255:
            raise IngestionError(f"only maxval 255 supported, got {maxval} in {path}")
        channels = 1 if magic == b"P5" else 3
        raw = f.read(w * h * channels)
        if len(raw) != w * h * channels:
            raise IngestionError(f"truncated pixel data in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3))


# ---------------------------------------------------------------------------
# resizing


def resize_bilinear(arr, out_h, out_w):
    """Half-pixel-centered bilinear resize of a 2D array."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape

    def axis_weights(n_in, n_out):
        s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.floor(s).astype(np.int64)
        frac = s - i0
        i1 = np.clip(i0 + 1, 0, n_in - 1)
        i0 = np.clip(i0, 0, n_in - 1)
        return i0, i1, frac

    iy0, iy1, fy = axis_weights(h, out_h)
    ix0, ix1, fx = axis_weights(w, out_w)
    rows = arr[iy0, :] * (1 - fy)[:, None] + arr[iy1, :] * fy[:, None]
    return rows[:, ix0] * (1 - fx) + rows[:, ix1] * fx


# ---------------------------------------------------------------------------
# synthetic moving-blob videos


@dataclass
class SyntheticSpec:
    videos: int = 4
    length: int = 24
    height: int = 32
    width: int = 48
    blobs: int = 2
    vel_min: float = 0.4
    vel_max: float = 1.6
    style: str = "A"
    gt_sigma: float = 2.0
    fixations_per_frame: int = 6
    brightness_drift: float = 0.3
    blob_sigma: float = 1.5

    def validate(self):
        if self.style not in ("A", "B"):
            raise ValueError(f"style must be 'A' or 'B', got {self.style!r}")
        if self.videos < 1 or self.length < 1 or self.blobs < 1:
            raise ValueError("videos, length and blobs must be positive")


def _blob_density(h, w, centers, sigma):
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    dens = np.zeros((h, w))
    for cy, cx in centers:
        dens += np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma * sigma))
    return dens


def generate_synthetic(spec, root, seed=0):
    """Write a synthetic dataset tree; byte-identical for identical seeds."""
    spec.validate()
    root = Path(root)
    try:
        (root / "videos").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IngestionError(f"cannot create dataset root {root}: {e}")
    h, w = spec.height, spec.width
    style_b = spec.style == "B"
    # style B keeps trajectories inside the top-left region and ramps brightness
    box_h, box_w = (0.6 * (h - 1), 0.6 * (w - 1)) if style_b else (h - 1.0, w - 1.0)

    with open(root / "dataset.txt", "w") as f:
        for k in ("videos", "length", "height", "width", "blobs", "style",
                  "gt_sigma", "fixations_per_frame"):
            f.write(f"{k} = {getattr(spec, k)}\n")
        f.write(f"seed = {seed}\n")

    for v in range(spec.videos):
        rng = np.random.default_rng([seed, v])
        vid = f"v{v:03d}"
        vdir = root / "videos" / vid
        (vdir / "frames").mkdir(parents=True, exist_ok=True)
        (vdir / "gt").mkdir(parents=True, exist_ok=True)

        pos = rng.uniform(0, 1, size=(spec.blobs, 2)) * np.array([box_h, box_w])
        speed = rng.uniform(spec.vel_min, spec.vel_max, size=spec.blobs)
        angle = rng.uniform(0, 2 * np.pi, size=spec.blobs)
        vel = np.stack([speed * np.sin(angle), speed * np.cos(angle)], axis=1)

        fix_lines = []
        for t in range(spec.length):
            pos += vel
            for ax, limit in enumerate((box_h, box_w)):
                low = pos[:, ax] < 0
                pos[low, ax] = -pos[low, ax]
                vel[low, ax] = -vel[low, ax]
                high = pos[:, ax] > limit
                pos[high, ax] = 2 * limit - pos[high, ax]
                vel[high, ax] = -vel[high, ax]
            centers = [(float(p[0]), float(p[1])) for p in pos]

            frame = 0.12 + 0.04 * rng.standard_normal((h, w))
            frame += 0.8 * _blob_density(h, w, centers, spec.blob_sigma)
            if style_b and spec.length > 1:
                frame += spec.brightness_drift * (t / (spec.length - 1))
            frame = np.clip(frame, 0.0, 1.0)
            write_pgm(vdir / "frames" / f"{t:06d}.pgm",
                      np.round(frame * 255).astype(np.uint8))

            dens = _blob_density(h, w, centers, spec.gt_sigma)
            write_pgm(vdir / "gt" / f"{t:06d}.pgm",
                      np.round(dens / dens.max() * 255).astype(np.uint8))

            p = (dens / dens.sum()).reshape(-1)
            picks = rng.choice(h * w, size=spec.fixations_per_frame, p=p)
            for flat in picks:
                fix_lines.append(f"{t} {int(flat % w)} {int(flat // w)}\n")

        with open(vdir / "fixations.txt", "w") as f:
            f.writelines(fix_lines)
    return scan_dataset(root)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class VideoEntry:
    video_id: str
    frame_count: int
    frames_dir: Path
    gt_dir: Path
    fixation_file: Path


@dataclass
class DatasetManifest:
    root: Path
    videos: list = field(default_factory=list)
    domain: int = 0
    split: str = "all"

    def video(self, video_id):
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise IngestionError(f"video {video_id!r} not in manifest for {self.root}")

    def video_ids(self):
        return [v.video_id for v in self.videos]


def scan_dataset(root, domain=0, split="all"):
    root = Path(root)
    vids_dir = root / "videos"
    if not vids_dir.is_dir():
        raise IngestionError(f"dataset root has no videos/ directory: {root}")
    entries = []
    for vdir in sorted(vids_dir.iterdir()):
        if not vdir.is_dir():
            continue
        frames = sorted((vdir / "frames").glob("*.pgm"))
        if not frames:
            raise IngestionError(f"no frames in {vdir / 'frames'}")
        gts = sorted((vdir / "gt").glob("*.pgm"))
        if len(gts) != len(frames):
            raise IngestionError(
                f"{vdir.name}: {len(frames)} frames but {len(gts)} gt maps")
        fix = vdir / "fixations.txt"
        if not fix.exists():
            raise IngestionError(f"missing fixation file: {fix}")
        entries.append(VideoEntry(vdir.name, len(frames), vdir / "frames",
                                  vdir / "gt", fix))
    if not entries:
        raise IngestionError(f"no videos found under {vids_dir}")
    return DatasetManifest(root, entries, domain, split)


def split_manifest(manifest, val_fraction=0.1, seed=0):
    """Deterministic validation carve-out by seeded hashing of video ids."""
    def key(vid):
        return hashlib.sha256(f"{seed}:{vid}".encode()).hexdigest()

    ordered = sorted(manifest.videos, key=lambda v: key(v.video_id))
    n_val = max(1, int(np.ceil(val_fraction * len(ordered))))
    val_ids = {v.video_id for v in ordered[:n_val]}
    train = [v for v in manifest.videos if v.video_id not in val_ids]
    val = [v for v in manifest.videos if v.video_id in val_ids]
    return (DatasetManifest(manifest.root, train, manifest.domain, "train"),
            DatasetManifest(manifest.root, val, manifest.domain, "val"))


# ---------------------------------------------------------------------------
# loading


def load_fixations(entry):
    """Parse a fixation file into {frame_idx: [(x, y), ...]}."""
    out = {}
    with open(entry.fixation_file) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3:
                raise IngestionError(
                    f"{entry.fixation_file}:{ln}: expected '<frame> <x> <y>'")
            t, x, y = (int(p) for p in parts)
            out.setdefault(t, []).append((x, y))
    return out


def fixation_map(points, native_hw, out_hw):
    """Binary fixation map at output resolution; coordinates are (x, y)."""
    nh, nw = native_hw
    oh, ow = out_hw
    m = np.zeros((oh, ow), dtype=np.uint8)
    for x, y in points:
        if not (0 <= x < nw and 0 <= y < nh):
            raise IngestionError(f"fixation ({x},{y}) outside {nw}x{nh} frame")
        ox = min(ow - 1, max(0, int(np.floor((x + 0.5) * ow / nw))))
        oy = min(oh - 1, max(0, int(np.floor((y + 0.5) * oh / nh))))
        m[oy, ox] = 1
    return m


def _frame_path(entry, idx):
    path = entry.frames_dir / f"{idx:06d}.pgm"
    if not path.exists():
        raise IngestionError(f"missing frame file: {path}")
    return path


def load_frame(path, size=None, channels=1):
    """Read one frame as float32 [C,H,W] scaled to [0,1]."""
    img = read_pnm(path).astype(np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    img /= 255.0
    if size is not None and img.shape != tuple(size):
        img = resize_bilinear(img, size[0], size[1])
    return np.repeat(img[None].astype(np.float32), channels, axis=0)


def load_gt(entry, idx, size=None):
    """Ground-truth density, renormalized to sum 1 after any resize."""
    path = entry.gt_dir / f"{idx:06d}.pgm"
    if not path.exists():
        raise IngestionError(f"missing gt file: {path}")
    dens = read_pnm(path).astype(np.float64)
    if size is not None and dens.shape != tuple(size):
        dens = np.clip(resize_bilinear(dens, size[0], size[1]), 0, None)
    s = dens.sum()
    if s <= 0:
        raise IngestionError(f"gt density sums to zero: {path}")
    return dens / s


def clip_frame_indices(t, clip_len, frame_count, reversed_clip=False):
    """0-based disk indices of the clip predicting (1-based) frame ``t``."""
    if reversed_clip:
        if not 1 <= t or t + clip_len - 1 > frame_count:
            raise InputError(
                f"reversed clip at t={t} needs frames up to {t + clip_len - 1}, "
                f"video has {frame_count}")
        return list(range(t + clip_len - 2, t - 2, -1))
    if not clip_len <= t <= frame_count:
        raise InputError(
            f"forward clip needs {clip_len} <= t <= {frame_count}, got t={t}")
    return list(range(t - clip_len, t))


def load_clip(manifest, video_id, t, clip_len, reversed_clip=False, size=None,
              channels=1):
    """Clip, gt density, and fixations for (1-based) target frame ``t``.

    Returns (clip [C,T,H,W] float32, gt [H,W] sum-1 float64, fixation list).
    """
    entry = manifest.video(video_id)
    idxs = clip_frame_indices(t, clip_len, entry.frame_count, reversed_clip)
    frames = [load_frame(_frame_path(entry, i), size, channels) for i in idxs]
    clip = np.stack(frames, axis=1)
    native = read_pnm(_frame_path(entry, idxs[0])).shape[:2]
    gt = load_gt(entry, t - 1, size)
    fixations = load_fixations(entry).get(t - 1, [])
    return clip, gt, fixations, native
