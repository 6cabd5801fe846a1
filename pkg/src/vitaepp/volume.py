"""Volumes, the ``.vvol`` container, preprocessing and synthetic data.

Container layout (all little-endian)::

    offset  size  field
    0       8     magic b"VITAEVOL"
    8       4     u32 version (1)
    12      4     u32 channels
    16      12    u32 x3 dims D, H, W
    28      12    f32 x3 spacing (mm)
    40      1     u8 dtype code (0 = f32, 1 = f64)
    41      4     u32 metadata length M
    45      19    reserved, zero
    64      M     UTF-8 JSON metadata {"id", "label", "provenance"}
    64+M    P     voxel payload, channel-major C, D, H, W
    64+M+P  4     u32 CRC32 of the payload

File size is therefore ``64 + M + P + 4``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"VITAEVOL"
VERSION = 1
HEADER = struct.Struct("<8sIIIII3fBI19x")
assert HEADER.size == 64
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


class VolumeFormatError(ValueError):
    """Malformed ``.vvol`` file; the message names the byte offset."""


@dataclass
class Volume:
    voxels: np.ndarray  # [C, D, H, W]
    id: str = ""
    label: int | None = None
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim == 3:
            self.voxels = self.voxels[None]
        if self.voxels.ndim != 4 or min(self.voxels.shape) < 1:
            raise ValueError(f"voxels must be [C, D, H, W] with positive sizes, got {self.voxels.shape}")
        if self.voxels.dtype not in (np.float32, np.float64):
            self.voxels = self.voxels.astype(np.float64)
        # the container stores spacing as f32
        self.spacing = tuple(float(np.float32(s)) for s in self.spacing)

    @property
    def channels(self) -> int:
        return self.voxels.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape[1:])

    def with_voxels(self, voxels: np.ndarray, **changes) -> "Volume":
        kw = dict(id=self.id, label=self.label, spacing=self.spacing, provenance=dict(self.provenance))
        kw.update(changes)
        return Volume(voxels, **kw)


@dataclass
class SegmentationMask:
    voxels: np.ndarray  # bool [D, H, W]

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels).astype(bool)
        if self.voxels.ndim != 3:
            raise ValueError(f"mask must be [D, H, W], got {self.voxels.shape}")

    def centroid(self) -> tuple[float, float, float]:
        coords = np.argwhere(self.voxels)
        if coords.size == 0:
            raise ValueError("segmentation mask has no foreground voxels")
        return tuple(float(c) for c in coords.mean(axis=0))


# -- preprocessing -------------------------------------------------------


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def background_intensity(v: Volume, corner: int = 8) -> np.ndarray:
    """Per-channel mode of the eight corner cubes.

    When several values share the top count (always the case for continuous
    noise), the median of the tied values is used.
    """
    D, H, W = v.dims
    cd, ch, cw = min(corner, D), min(corner, H), min(corner, W)
    out = np.empty(v.channels)
    for c in range(v.channels):
        x = v.voxels[c]
        parts = [
            x[sd, sh, sw].ravel()
            for sd in (slice(0, cd), slice(D - cd, D))
            for sh in (slice(0, ch), slice(H - ch, H))
            for sw in (slice(0, cw), slice(W - cw, W))
        ]
        vals, counts = np.unique(np.concatenate(parts), return_counts=True)
        out[c] = np.median(vals[counts == counts.max()])
    return out


def crop_to_bbox(v: Volume, m: SegmentationMask, side: int = 96) -> Volume:
    """Cube of ``side`` voxels centred on the mask centroid; outside is background."""
    if side < 1:
        raise ValueError("side must be >= 1")
    if m.voxels.shape != v.dims:
        raise ValueError(f"mask dims {m.voxels.shape} do not match volume dims {v.dims}")
    center = [round_half_up(c) for c in m.centroid()]
    starts = [c - side // 2 for c in center]
    bg = background_intensity(v)
    out = np.empty((v.channels, side, side, side), dtype=v.voxels.dtype)
    out[...] = bg.astype(out.dtype)[:, None, None, None]
    src, dst = [], []
    for s, n in zip(starts, v.dims):
        lo, hi = max(s, 0), min(s + side, n)
        if lo >= hi:
            src.append(slice(0, 0))
            dst.append(slice(0, 0))
        else:
            src.append(slice(lo, hi))
            dst.append(slice(lo - s, hi - s))
    out[(slice(None), *dst)] = v.voxels[(slice(None), *src)]
    prov = dict(v.provenance, crop_start=starts, crop_side=side)
    return v.with_voxels(out, provenance=prov)


def rescale_intensity(v: Volume, bounds: Sequence[tuple[float, float]] | None = None) -> Volume:
    """Per-channel affine map of [min, max] onto [0, 255].

    ``bounds`` overrides the per-volume (min, max), e.g. with dataset-wide
    statistics. Constant channels map to all zeros.
    """
    out = np.empty_like(v.voxels)
    for c in range(v.channels):
        x = v.voxels[c]
        lo, hi = (float(x.min()), float(x.max())) if bounds is None else bounds[c]
        if hi <= lo:
            out[c] = 0.0
        else:
            out[c] = np.clip((x - lo) * (255.0 / (hi - lo)), 0.0, 255.0)
    return v.with_voxels(out)


def stack_modalities(vs: Sequence[Volume], id: str | None = None) -> Volume:
    if not vs:
        raise ValueError("no volumes to stack")
    dims = vs[0].dims
    for v in vs:
        if v.channels != 1:
            raise ValueError(f"stack_modalities expects single-channel volumes, {v.id!r} has {v.channels}")
        if v.dims != dims:
            raise ValueError(f"dimension mismatch: {v.dims} vs {dims}")
    return vs[0].with_voxels(np.concatenate([v.voxels for v in vs]), id=id if id is not None else vs[0].id)


def preprocess_volume(v: Volume, m: SegmentationMask | None, side: int) -> Volume:
    """Crop around the lesion (when a mask is given), then rescale to [0, 255]."""
    if m is not None:
        v = crop_to_bbox(v, m, side)
    return rescale_intensity(v)


# -- container I/O -----------------------------------------------------------


def volume_to_bytes(v: Volume) -> bytes:
    arr = np.ascontiguousarray(v.voxels, dtype=v.voxels.dtype.newbyteorder("<"))
    code = _CODES[arr.dtype]
    meta = json.dumps({"id": v.id, "label": v.label, "provenance": v.provenance}, sort_keys=True).encode()
    payload = arr.tobytes()
    head = HEADER.pack(MAGIC, VERSION, v.channels, *v.dims, *v.spacing, code, len(meta))
    return head + meta + payload + struct.pack("<I", zlib.crc32(payload))


def volume_from_bytes(buf: bytes, source: str = "<bytes>") -> Volume:
    if len(buf) < HEADER.size:
        raise VolumeFormatError(f"{source}: truncated header at offset {len(buf)} (need {HEADER.size} bytes)")
    magic, version, C, D, H, W, s0, s1, s2, code, mlen = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise VolumeFormatError(f"{source}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise VolumeFormatError(f"{source}: unsupported version {version} at offset 8")
    if code not in _DTYPES:
        raise VolumeFormatError(f"{source}: unknown dtype code {code} at offset 40")
    dt = _DTYPES[code]
    p0 = HEADER.size + mlen
    nbytes = C * D * H * W * dt.itemsize
    if len(buf) < p0 + nbytes + 4:
        raise VolumeFormatError(
            f"{source}: truncated at offset {len(buf)}; expected {p0 + nbytes + 4} bytes"
        )
    try:
        meta = json.loads(buf[HEADER.size : p0].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{source}: unreadable metadata at offset {HEADER.size}") from exc
    payload = buf[p0 : p0 + nbytes]
    (crc,) = struct.unpack_from("<I", buf, p0 + nbytes)
    if crc != zlib.crc32(payload):
        raise VolumeFormatError(f"{source}: payload CRC mismatch (checksum at offset {p0 + nbytes})")
    vox = np.frombuffer(payload, dtype=dt).reshape(C, D, H, W).astype(dt.newbyteorder("="))
    return Volume(vox, id=meta.get("id", ""), label=meta.get("label"), spacing=(s0, s1, s2),
                  provenance=meta.get("provenance", {}))


def write_volume(path: str | Path, v: Volume) -> None:
    Path(path).write_bytes(volume_to_bytes(v))


def read_volume(path: str | Path) -> Volume:
    return volume_from_bytes(Path(path).read_bytes(), str(path))


# -- datasets ------------------------------------------------------------------


MANIFEST = "manifest.jsonl"


@dataclass
class VolumeDataset:
    root: Path
    entries: list[dict]
    checksum: str

    @property
    def ids(self) -> list[str]:
        return [e["id"] for e in self.entries]

    @property
    def labels(self) -> list[int | None]:
        return [e.get("label") for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def open(cls, root: str | Path) -> "VolumeDataset":
        root = Path(root)
        path = root / MANIFEST
        if not path.is_file():
            raise FileNotFoundError(f"no dataset manifest at {path}")
        raw = path.read_bytes()
        entries = [json.loads(line) for line in raw.decode().splitlines() if line.strip()]
        for e in entries:
            if not (root / e["path"]).is_file():
                raise FileNotFoundError(f"manifest entry {e['id']!r} points to missing file {root / e['path']}")
        labelled = [e.get("label") is not None for e in entries]
        if any(labelled) and not all(labelled):
            missing = [e["id"] for e, ok in zip(entries, labelled) if not ok]
            raise ValueError(f"labels missing for records: {missing}")
        return cls(root, entries, hashlib.sha256(raw).hexdigest())

    def volume(self, i: int) -> Volume:
        return read_volume(self.root / self.entries[i]["path"])

    def mask(self, i: int) -> SegmentationMask | None:
        rel = self.entries[i].get("mask")
        if rel is None:
            return None
        return SegmentationMask(read_volume(self.root / rel).voxels[0] > 0.5)

    def volumes(self) -> list[Volume]:
        return [self.volume(i) for i in range(len(self))]


def write_dataset(root: str | Path, volumes: Sequence[Volume], masks: Sequence[SegmentationMask] | None = None) -> VolumeDataset:
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, v in enumerate(volumes):
        rel = f"volumes/{v.id}.vvol"
        write_volume(root / rel, v)
        entry = {"id": v.id, "path": rel, "label": v.label}
        if masks is not None:
            mrel = f"volumes/{v.id}_mask.vvol"
            write_volume(root / mrel, Volume(masks[i].voxels[None].astype(np.float32), id=f"{v.id}_mask"))
            entry["mask"] = mrel
        lines.append(json.dumps(entry, sort_keys=True))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return VolumeDataset.open(root)


# -- synthetic data ------------------------------------------------------------

# Per-modality background level and lesion contrast, loosely FLAIR/T1/T2/T1-c.
_BACKGROUND = (0.20, 0.30, 0.25, 0.15)
_CONTRAST = (1.00, 0.60, 0.80, 0.90)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


def _ellipsoid(coords: np.ndarray, center, radii, rot, width: float = 0.08) -> np.ndarray:
    u = np.einsum("ij,j...->i...", rot.T, coords - np.asarray(center)[:, None, None, None])
    rho = np.sqrt(sum((u[i] / radii[i]) ** 2 for i in range(3)))
    return 1.0 / (1.0 + np.exp(-(1.0 - rho) / width))


def synthesize(
    n: int,
    side: int,
    seed: int,
    classes: int = 2,
    channels: int = 4,
    margin: float = 0.1,
    noise: float = 0.03,
    texture: float = 0.35,
    lobes: bool = True,
) -> list[tuple[Volume, SegmentationMask]]:
    """In-memory two-class lesion volumes with paired masks.

    Class 0 holds one smooth ellipsoid. Class 1 holds two smaller lobes with a
    sinusoidal texture (about 4 voxel period) and lesion contrast scaled by
    ``1 + margin``. With ``lobes=False`` class 1 keeps the class-0 shape and
    differs only in texture and contrast. Every volume has additive Gaussian
    noise. Intensities are
    in arbitrary scanner-like units (x1000), not yet rescaled.
    """
    if classes != 2:
        raise ValueError("only two classes are supported")
    if n < 2 or side < 16:
        raise ValueError(f"need n >= 2 and side >= 16, got n={n}, side={side}")
    if not 1 <= channels <= len(_BACKGROUND):
        raise ValueError(f"channels must be in 1..{len(_BACKGROUND)}")
    labels = np.array([i % 2 for i in range(n)])
    rng = np.random.default_rng(seed)
    labels = labels[rng.permutation(n)]
    grid = np.indices((side, side, side), dtype=np.float64)
    out = []
    for i, y in enumerate(labels):
        c0 = side / 2 + rng.uniform(-side / 8, side / 8, size=3)
        rot = _random_rotation(rng)
        if y == 0 or not lobes:
            profile = _ellipsoid(grid, c0, side * rng.uniform(0.18, 0.26, size=3), rot)
        else:
            axis = rot[:, 0]
            off = side * rng.uniform(0.12, 0.16)
            p1 = _ellipsoid(grid, c0 + off * axis, side * rng.uniform(0.12, 0.18, size=3), rot)
            p2 = _ellipsoid(grid, c0 - off * axis, side * rng.uniform(0.12, 0.18, size=3), rot)
            profile = np.maximum(p1, p2)
        tex = 1.0
        if y == 1:
            wave = _random_rotation(rng)[:, 0]
            phase = rng.uniform(0, 2 * np.pi)
            tex = 1.0 + texture * np.sin(2 * np.pi * 0.25 * np.einsum("i,i...->...", wave, grid) + phase)
        gain = rng.uniform(0.9, 1.1) * (1.0 + margin * y)
        vox = np.empty((channels, side, side, side))
        for c in range(channels):
            vox[c] = _BACKGROUND[c] + _CONTRAST[c] * gain * profile * tex
            vox[c] += noise * rng.standard_normal((side, side, side))
        vid = f"syn{i:04d}"
        vol = Volume(
            (vox * 1000.0).astype(np.float32),
            id=vid,
            label=int(y),
            provenance={"generator": "synthetic", "seed": seed, "index": i},
        )
        out.append((vol, SegmentationMask(profile > 0.5)))
    return out


def generate_synthetic(n: int, side: int, seed: int, root: str | Path, classes: int = 2, **kw) -> VolumeDataset:
    """Write ``synthesize(...)`` output (volumes plus masks) to a dataset directory."""
    pairs = synthesize(n, side, seed, classes=classes, **kw)
    return write_dataset(root, [v for v, _ in pairs], [m for _, m in pairs])


def preprocess_dataset(src: VolumeDataset, root: str | Path, side: int) -> VolumeDataset:
    vols = []
    for i in range(len(src)):
        vols.append(preprocess_volume(src.volume(i), src.mask(i), side))
    return write_dataset(root, vols)


def convert_array(arr: np.ndarray, id: str, label: int | None = None, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """Wrap an already-decoded [C, D, H, W] or [D, H, W] array (e.g. from a
    NIfTI reader) as a Volume; clinical formats are parsed elsewhere."""
    return Volume(np.asarray(arr, dtype=np.float32), id=id, label=label, spacing=spacing,
                  provenance={"converted": True})


def load_array(ds: VolumeDataset, dtype=np.float32) -> tuple[np.ndarray, list[int | None]]:
    """Stack a dataset of equally sized volumes into [N, C, D, H, W]."""
    vols = ds.volumes()
    return np.stack([v.voxels.astype(dtype) for v in vols]), [v.label for v in vols]
