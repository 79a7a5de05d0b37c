"""Synthetic manipulated images and their on-disk dataset format.

Host images are procedural (multi-octave value noise, a colour gradient and a
few flat shapes) with a per-image sensor-noise level. Three manipulations are
produced: splicing (a region from a different host, with extra noise),
copy-move (a region duplicated within the host) and removal (a region filled
from its surrounding ring).

Files: images are binary PPM (P6), masks binary PGM (P5, 0/255), and each
split has a JSON-lines manifest of ``{"image", "mask", "class", "bbox"}``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import BBox, tight_bbox

SPLICING, COPY_MOVE, REMOVAL = 0, 1, 2
CLASS_NAMES = ("splicing", "copy-move", "removal")
MIN_AREA = 64
MAX_AREA_FRAC = 0.25


class DataError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    cls: int
    bbox: BBox

    @property
    def hw(self) -> tuple[int, int]:
        return self.image.shape[:2]


@dataclass
class ForgeConfig:
    """Generator knobs. Radii are fractions of the shorter image side."""

    size: int = 192
    splice_sigma: float = 2.0
    host_sigma: tuple = (0.5, 1.5)
    removal_sigma: float = 0.5
    radius: tuple = (0.07, 0.2)
    ring: int = 3


# -- procedural content ------------------------------------------------------------
def resize_bilinear(img: np.ndarray, out_hw) -> np.ndarray:
    """Bilinear resize with half-pixel centres; works on (H, W[, C]) arrays."""
    h, w = img.shape[:2]
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return img.astype(np.float64)
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).reshape(-1, 1, *([1] * (img.ndim - 2)))
    wx = (xs - x0).reshape(1, -1, *([1] * (img.ndim - 2)))
    f = img.astype(np.float64)
    top = f[y0][:, x0] * (1 - wx) + f[y0][:, x1] * wx
    bot = f[y1][:, x0] * (1 - wx) + f[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def procedural_host(rng: np.random.Generator, size: int = 192, sigma: float | None = None,
                    host_sigma=(0.5, 1.5)) -> np.ndarray:
    """A textured RGB image with its own sensor-noise level."""
    h = w = size
    img = np.zeros((h, w, 3))
    for cells, amp in ((3, 70.0), (6, 35.0), (12, 15.0)):
        grid = rng.uniform(-1, 1, (cells + 1, cells + 1, 3))
        img += amp * resize_bilinear(grid, (h, w))
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[:h, :w] / size
    img += (np.cos(theta) * xx + np.sin(theta) * yy)[..., None] * rng.uniform(-40, 40, 3)
    img += rng.uniform(70, 180, 3)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(0.05, 0.2) * size
        if rng.random() < 0.5:
            shape = np.hypot(yy * size - cy, xx * size - cx) < r
        else:
            shape = (np.abs(yy * size - cy) < r) & (np.abs(xx * size - cx) < r * rng.uniform(0.5, 1.5))
        img[shape] = 0.5 * img[shape] + 0.5 * rng.uniform(30, 220, 3)
    if sigma is None:
        sigma = rng.uniform(*host_sigma)
    img += rng.normal(0, sigma, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def random_blob(rng: np.random.Generator, hw, radius_px: tuple) -> np.ndarray:
    """Star-shaped blob mask (radial harmonics) in a tight (h, w) window."""
    r0 = rng.uniform(*radius_px)
    k = np.arange(1, 5)
    amp = rng.uniform(0, 0.25, 4) / k
    phase = rng.uniform(0, 2 * np.pi, 4)
    aspect = rng.uniform(0.6, 1.0)
    span = int(np.ceil(r0 * (1 + amp.sum()))) + 1
    yy, xx = np.mgrid[-span:span + 1, -span:span + 1].astype(np.float64)
    if rng.random() < 0.5:
        yy = yy / aspect
    else:
        xx = xx / aspect
    ang = np.arctan2(yy, xx)
    rad = r0 * (1 + (amp[:, None, None] * np.cos(k[:, None, None] * ang + phase[:, None, None])).sum(0))
    m = (np.hypot(yy, xx) <= rad).astype(np.uint8)
    ys, xs = np.nonzero(m)
    m = m[ys.min():ys.max() + 1, xs.min():xs.max() + 1]
    if m.shape[0] > hw[0] or m.shape[1] > hw[1]:
        raise DataError(f"region {m.shape} larger than host {tuple(hw)}")
    return m


def _blob_for(rng, hw, cfg: ForgeConfig) -> np.ndarray:
    short = min(hw)
    lo, hi = cfg.radius[0] * short, cfg.radius[1] * short
    for _ in range(100):
        b = random_blob(rng, hw, (lo, hi))
        a = int(b.sum())
        if MIN_AREA <= a <= MAX_AREA_FRAC * hw[0] * hw[1]:
            return b
    raise DataError("could not draw a blob within the area bounds")


def _place(rng, hw, blob_hw) -> tuple[int, int]:
    return int(rng.integers(0, hw[0] - blob_hw[0] + 1)), int(rng.integers(0, hw[1] - blob_hw[1] + 1))


def _finish(image, mask, cls) -> Sample:
    return Sample(image, mask, cls, tight_bbox(mask))


# -- manipulations --------------------------------------------------------------------
def synth_splice(host: np.ndarray, donor: np.ndarray, seed, cfg: ForgeConfig | None = None,
                 region: np.ndarray | None = None) -> Sample:
    """Paste a donor region (plus Gaussian noise) into the host."""
    cfg = cfg or ForgeConfig()
    rng = np.random.default_rng(seed)
    hw = host.shape[:2]
    blob = _blob_for(rng, hw, cfg) if region is None else np.asarray(region, np.uint8)
    bh, bw = blob.shape
    if bh > hw[0] or bw > hw[1] or bh > donor.shape[0] or bw > donor.shape[1]:
        raise DataError(f"region {blob.shape} larger than host {tuple(hw)}")
    sy, sx = _place(rng, donor.shape[:2], blob.shape)
    dy, dx = _place(rng, hw, blob.shape)
    patch = donor[sy:sy + bh, sx:sx + bw].astype(np.float64)
    if cfg.splice_sigma > 0:
        patch = patch + rng.normal(0, cfg.splice_sigma, patch.shape)
    patch = np.clip(np.rint(patch), 0, 255).astype(np.uint8)
    image = host.copy()
    mask = np.zeros(hw, np.uint8)
    sel = blob.astype(bool)
    image[dy:dy + bh, dx:dx + bw][sel] = patch[sel]
    mask[dy:dy + bh, dx:dx + bw] = blob
    return _finish(image, mask, SPLICING)


def synth_copy_move(host: np.ndarray, seed, cfg: ForgeConfig | None = None) -> Sample:
    """Duplicate a host region to a location whose box is disjoint from the source."""
    cfg = cfg or ForgeConfig()
    rng = np.random.default_rng(seed)
    hw = host.shape[:2]
    for attempt in range(100):
        if attempt % 10 == 0:
            blob = _blob_for(rng, hw, cfg)
            bh, bw = blob.shape
        sy, sx = _place(rng, hw, blob.shape)
        dy, dx = _place(rng, hw, blob.shape)
        if dy >= sy + bh or sy >= dy + bh or dx >= sx + bw or sx >= dx + bw:
            break
    else:
        raise DataError("cannot place copy-move regions disjointly after 100 attempts")
    image = host.copy()
    sel = blob.astype(bool)
    image[dy:dy + bh, dx:dx + bw][sel] = host[sy:sy + bh, sx:sx + bw][sel]
    mask = np.zeros(hw, np.uint8)
    mask[dy:dy + bh, dx:dx + bw] = blob
    return _finish(image, mask, COPY_MOVE)


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.astype(bool).copy()
    h, w = mask.shape
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx > r * r:
                continue
            src = mask.astype(bool)[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            out[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)] |= src
    return out


def synth_removal(host: np.ndarray, seed, cfg: ForgeConfig | None = None) -> Sample:
    """Erase a region, filling it with its surrounding ring's mean colour plus
    low-amplitude noise."""
    cfg = cfg or ForgeConfig()
    rng = np.random.default_rng(seed)
    hw = host.shape[:2]
    blob = _blob_for(rng, hw, cfg)
    dy, dx = _place(rng, hw, blob.shape)
    mask = np.zeros(hw, np.uint8)
    mask[dy:dy + blob.shape[0], dx:dx + blob.shape[1]] = blob
    sel = mask.astype(bool)
    ring = _dilate(mask, cfg.ring) & ~sel
    fill = host[ring].astype(np.float64).mean(axis=0)
    vals = fill + rng.normal(0, cfg.removal_sigma, (int(sel.sum()), 3))
    image = host.copy()
    image[sel] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    return _finish(image, mask, REMOVAL)


def synth_sample(seed, cls: int, cfg: ForgeConfig | None = None) -> Sample:
    """One sample of class ``cls``, fully determined by ``seed``."""
    cfg = cfg or ForgeConfig()
    ss = np.random.SeedSequence(seed)
    host_seed, donor_seed, op_seed = ss.spawn(3)
    host = procedural_host(np.random.default_rng(host_seed), cfg.size, host_sigma=cfg.host_sigma)
    if cls == SPLICING:
        donor = procedural_host(np.random.default_rng(donor_seed), cfg.size, host_sigma=cfg.host_sigma)
        return synth_splice(host, donor, op_seed, cfg)
    if cls == COPY_MOVE:
        return synth_copy_move(host, op_seed, cfg)
    if cls == REMOVAL:
        return synth_removal(host, op_seed, cfg)
    raise DataError(f"unknown manipulation class {cls}")


def generate(count: int, seed: int, cfg: ForgeConfig | None = None, balanced: bool = True) -> list[Sample]:
    """``count`` samples; balanced mode assigns classes round-robin in a
    seeded order so each class gets ``count / 3`` (up to rounding)."""
    if count <= 0:
        raise DataError(f"invalid sample count {count}")
    rng = np.random.default_rng([seed, 0xC1A55])
    if balanced:
        classes = rng.permutation(np.arange(count) % 3)
    else:
        classes = rng.integers(0, 3, count)
    return [synth_sample([seed, i], int(c), cfg) for i, c in enumerate(classes)]


def validate(sample: Sample) -> list[str]:
    """Violations of the sample invariants (empty when valid)."""
    problems = []
    h, w = sample.mask.shape
    if sample.image.shape != (h, w, 3) or sample.image.dtype != np.uint8:
        problems.append(f"image shape/dtype {sample.image.shape}/{sample.image.dtype}")
    if not np.all((sample.mask == 0) | (sample.mask == 1)):
        problems.append("mask is not binary")
    area = int(sample.mask.sum())
    if area < MIN_AREA:
        problems.append(f"mask area {area} below {MIN_AREA}")
    elif tuple(sample.bbox) != tuple(tight_bbox(sample.mask)):
        problems.append(f"bbox {tuple(sample.bbox)} differs from tight box {tuple(tight_bbox(sample.mask))}")
    if sample.cls not in (SPLICING, COPY_MOVE, REMOVAL):
        problems.append(f"class {sample.cls} out of range")
    return problems


# -- augmentation ------------------------------------------------------------------------
def augment_flip(sample: Sample, apply: bool = True) -> Sample:
    """Horizontal flip of image, mask and box."""
    if not apply:
        return sample
    w = sample.image.shape[1]
    b = sample.bbox
    return replace(sample, image=sample.image[:, ::-1].copy(), mask=sample.mask[:, ::-1].copy(),
                   bbox=BBox(w - b.x2, b.y1, w - b.x1, b.y2))


def augment_noise(sample: Sample, sigma: float, rng: np.random.Generator) -> Sample:
    """Additive Gaussian noise over the whole image."""
    if sigma <= 0:
        return sample
    img = sample.image.astype(np.float64) + rng.normal(0, sigma, sample.image.shape)
    return replace(sample, image=np.clip(np.rint(img), 0, 255).astype(np.uint8))


# -- file formats ----------------------------------------------------------------------
def _read_netpbm(path, magic: bytes) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    raw = path.read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"malformed header in {path}")
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} header, found {fields[0]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DataError(f"malformed header in {path}") from None
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    body = raw[pos:pos + need]
    if len(body) != need:
        raise DataError(f"{path}: truncated pixel data ({len(body)} of {need} bytes)")
    arr = np.frombuffer(body, np.uint8).reshape(h, w, ch) if ch == 3 else np.frombuffer(body, np.uint8).reshape(h, w)
    return arr.copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")


def write_ppm(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + image.tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


@dataclass
class Record:
    image: str
    mask: str
    cls: int
    bbox: BBox


@dataclass
class DatasetManifest:
    root: Path
    split: str
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def load_sample(self, i: int) -> Sample:
        r = self.records[i]
        image = read_ppm(self.root / r.image)
        mask = (read_pgm(self.root / r.mask) > 127).astype(np.uint8)
        if image.shape[:2] != mask.shape:
            raise DataError(f"{r.image}: image and mask sizes differ")
        return Sample(image, mask, r.cls, r.bbox)

    def samples(self):
        for i in range(len(self)):
            yield self.load_sample(i)


def save_dataset(samples, root, split: str) -> Path:
    """Write images, masks and ``<split>.jsonl``; returns the manifest path."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img = f"{split}/{i:05d}.ppm"
        msk = f"{split}/{i:05d}_mask.pgm"
        write_ppm(root / img, s.image)
        write_pgm(root / msk, s.mask.astype(np.uint8) * 255)
        lines.append(json.dumps({"image": img, "mask": msk, "class": int(s.cls),
                                 "bbox": [float(v) for v in s.bbox]}))
    path = root / f"{split}.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def load_dataset(manifest_path, validate_masks: bool = True) -> DatasetManifest:
    """Parse a JSON-lines manifest and check each record against its files."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"missing manifest: {manifest_path}")
    root = manifest_path.parent
    split = manifest_path.stem
    man = DatasetManifest(root, split)
    for n, line in enumerate(manifest_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = Record(obj["image"], obj["mask"], int(obj["class"]), BBox(*map(float, obj["bbox"])))
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"{manifest_path}:{n}: malformed record ({e})") from None
        for key in (rec.image, rec.mask):
            if not (root / key).exists():
                raise DataError(f"{manifest_path}:{n}: missing file {key}")
        man.records.append(rec)
        if validate_masks:
            mask = (read_pgm(root / rec.mask) > 127).astype(np.uint8)
            if mask.sum() == 0 or tuple(tight_bbox(mask)) != tuple(rec.bbox):
                raise DataError(f"{manifest_path}:{n}: bbox inconsistent with mask {rec.mask}")
    return man


def shared_images(a: DatasetManifest, b: DatasetManifest) -> set:
    """Image files referenced by both manifests (should be empty)."""
    pa = {os.path.normpath(a.root / r.image) for r in a.records}
    pb = {os.path.normpath(b.root / r.image) for r in b.records}
    return pa & pb
