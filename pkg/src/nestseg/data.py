"""PGM I/O, the synthetic blob generator, and manifest-driven dataset loading.

Manifests are tab-separated text::

    # nestseg-manifest v1
    # generator seed=0 count=200 ...        (synthetic sets only)
    id	image_path	mask_path	split

Paths are relative to the manifest's directory.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_HEADER = "# nestseg-manifest v1"
SPLITS = ("train", "val", "test")


# -- PGM (binary P5) -----------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary PGM."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"write_pgm expects uint8 data, got {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _header_tokens(buf: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a uint8 (maxval < 256) or uint16 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        tokens, offset = _header_tokens(buf, 4)
        if tokens[0] != b"P5":
            raise ValueError(f"not a binary PGM (magic {tokens[0]!r})")
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: invalid maxval {maxval}")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = w * h * dtype.itemsize
    raster = buf[offset:offset + need]
    if len(raster) != need:
        raise ValueError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=dtype).reshape(h, w)
    return arr.astype(np.uint16) if dtype.itemsize == 2 else arr.copy()


# -- synthetic data -----------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    count: int = 200
    image_size: Tuple[int, int] = (96, 96)
    blob_count: Tuple[int, int] = (1, 4)
    radius_range: Tuple[float, float] = (0.08, 0.22)  # fraction of the shorter side
    noise: float = 0.08
    foreground_band: Tuple[float, float] = (0.05, 0.40)
    split_fractions: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    depth: int = 5

    def to_line(self) -> str:
        parts = []
        for k, v in asdict(self).items():
            if isinstance(v, (tuple, list)):
                v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            parts.append(f"{k}={v}")
        return "# generator " + " ".join(parts)


def ellipse_mask(shape: Tuple[int, int], center, radii, angle: float = 0.0, supersample: int = 1) -> np.ndarray:
    """Fraction of each pixel covered by a rotated ellipse.

    With ``supersample == 1`` this is the exact interior test at pixel
    centres (a 0/1 mask); larger values give anti-aliased coverage.
    """
    h, w = shape
    s = supersample
    offs = (np.arange(s) + 0.5) / s
    ys = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    xs = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    dy = ys[:, None] - center[0]
    dx = xs[None, :] - center[1]
    c, sn = np.cos(angle), np.sin(angle)
    u = (dx * c + dy * sn) / radii[1]
    v = (-dx * sn + dy * c) / radii[0]
    inside = (u * u + v * v <= 1.0).astype(np.float64)
    return inside.reshape(h, s, w, s).mean(axis=(1, 3))


def _render_sample(rng: np.random.Generator, cfg: SyntheticConfig) -> Tuple[np.ndarray, np.ndarray]:
    h, w = cfg.image_size
    side = min(h, w)
    lo, hi = cfg.foreground_band
    for _ in range(1000):
        n = int(rng.integers(cfg.blob_count[0], cfg.blob_count[1] + 1))
        mask = np.zeros((h, w), dtype=bool)
        coverage = np.zeros((h, w))
        intensity = np.zeros((h, w))
        for _ in range(n):
            ry, rx = rng.uniform(*cfg.radius_range, size=2) * side
            cy = rng.uniform(ry, h - ry)
            cx = rng.uniform(rx, w - rx)
            angle = rng.uniform(0, np.pi)
            level = rng.uniform(0.55, 0.95)
            cov = ellipse_mask((h, w), (cy, cx), (ry, rx), angle, supersample=4)
            mask |= ellipse_mask((h, w), (cy, cx), (ry, rx), angle) > 0
            intensity = np.where(cov > coverage, level, intensity)
            coverage = np.maximum(coverage, cov)
        frac = mask.mean()
        if lo <= frac <= hi:
            break
    else:
        raise RuntimeError(f"could not hit foreground band {cfg.foreground_band} in 1000 draws")

    gy, gx = rng.uniform(-0.15, 0.15, size=2)
    yy, xx = np.mgrid[0:h, 0:w]
    background = 0.2 + gy * (yy / h - 0.5) + gx * (xx / w - 0.5)
    img = background * (1 - coverage) + intensity * coverage
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, size=img.shape)
    img8 = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return img8, mask.astype(np.uint8) * 255


def _pad_to_multiple(arr: np.ndarray, step: int) -> np.ndarray:
    h, w = arr.shape
    ph, pw = (-h) % step, (-w) % step
    return np.pad(arr, ((0, ph), (0, pw))) if ph or pw else arr


def split_counts(count: int, fractions: Sequence[float]) -> Tuple[int, int, int]:
    n_train = int(round(count * fractions[0]))
    n_val = int(round(count * fractions[1]))
    return n_train, n_val, count - n_train - n_val


@dataclass
class ManifestEntry:
    id: str
    image: str
    mask: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: List[ManifestEntry]
    generator: Optional[str] = None  # raw generator comment line, if synthetic
    path: Optional[Path] = None

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> Dict[str, int]:
        return {s: len(self.split(s)) for s in SPLITS}

    def validate(self) -> None:
        seen_ids, seen_files = {}, {}
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"sample {e.id}: unknown split {e.split!r}")
            if e.id in seen_ids:
                raise ValueError(f"sample id {e.id} listed twice (splits {seen_ids[e.id]} and {e.split})")
            seen_ids[e.id] = e.split
            for f in (e.image, e.mask):
                other = seen_files.get(f)
                if other is not None and other != e.split:
                    raise ValueError(f"file {f} shared between splits {other} and {e.split}")
                seen_files[f] = e.split
                if not (self.root / f).is_file():
                    raise FileNotFoundError(f"manifest references missing file {self.root / f}")

    def write(self, path) -> Path:
        path = Path(path)
        lines = [MANIFEST_HEADER]
        if self.generator:
            lines.append(self.generator)
        lines += [f"{e.id}\t{e.image}\t{e.mask}\t{e.split}" for e in self.entries]
        path.write_text("\n".join(lines) + "\n")
        self.path = path
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"manifest not found: {path}")
        lines = path.read_text().splitlines()
        if not lines or lines[0].strip() != MANIFEST_HEADER:
            raise ValueError(f"{path}: missing header line {MANIFEST_HEADER!r}")
        generator, entries = None, []
        for lineno, line in enumerate(lines[1:], 2):
            if not line.strip():
                continue
            if line.startswith("#"):
                if line.startswith("# generator"):
                    generator = line
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            entries.append(ManifestEntry(*parts))
        return cls(path.parent, entries, generator, path)


def generate_synthetic(config: SyntheticConfig, root) -> DatasetManifest:
    """Render ``config.count`` image/mask PGM pairs under ``root`` plus a manifest.

    Output is byte-identical for a fixed seed. Sizes that the network
    cannot pool down ``depth - 1`` times are zero-padded with a warning.
    """
    root = Path(root)
    h, w = config.image_size
    if h < 1 or w < 1:
        raise ValueError(f"image size must be positive, got {config.image_size}")
    if config.count < 1:
        raise ValueError(f"count must be >= 1, got {config.count}")
    step = 2 ** (config.depth - 1)
    if h % step or w % step:
        warnings.warn(
            f"image size {h}x{w} is not divisible by {step}; padding to "
            f"{h + (-h) % step}x{w + (-w) % step}",
            stacklevel=2,
        )
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    n_train, n_val, _ = split_counts(config.count, config.split_fractions)
    width = max(4, len(str(config.count - 1)))
    entries = []
    for k in range(config.count):
        img, mask = _render_sample(rng, config)
        img, mask = _pad_to_multiple(img, step), _pad_to_multiple(mask, step)
        sid = f"s{k:0{width}d}"
        ipath, mpath = f"images/{sid}.pgm", f"masks/{sid}.pgm"
        write_pgm(root / ipath, img)
        write_pgm(root / mpath, mask)
        split = "train" if k < n_train else "val" if k < n_train + n_val else "test"
        entries.append(ManifestEntry(sid, ipath, mpath, split))
    manifest = DatasetManifest(root, entries, config.to_line())
    manifest.write(root / "manifest.tsv")
    logger.info("wrote %d samples to %s", config.count, root)
    return manifest


# -- loading ---------------------------------------------------------------------

@dataclass
class DataSplit:
    name: str
    ids: List[str]
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    masks: np.ndarray  # (N, 1, H, W) float32 in {0, 1}

    def __len__(self) -> int:
        return len(self.ids)

    def batches(self, batch_size: int, seed: Optional[int] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Yield (images, masks) batches; shuffled iff ``seed`` is given.

        The trailing short batch is kept.
        """
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        order = np.arange(len(self))
        if seed is not None:
            order = np.random.default_rng(seed).permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.masks[idx]


def _load_pair(root: Path, entry: ManifestEntry, expect: Optional[Tuple[int, int]]):
    ipath, mpath = root / entry.image, root / entry.mask
    try:
        img = read_pgm(ipath)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read image {ipath}: {exc}") from None
    try:
        mask = read_pgm(mpath)
    except (OSError, ValueError) as exc:
        raise ValueError(f"cannot read mask {mpath}: {exc}") from None
    if img.shape != mask.shape:
        raise ValueError(f"{mpath}: mask size {mask.shape} != image size {img.shape}")
    if expect is not None and img.shape != expect:
        raise ValueError(f"{ipath}: size {img.shape} differs from the dataset's {expect}")
    scale = 255.0 if img.dtype == np.uint8 else 65535.0
    mthresh = 127.5 if mask.dtype == np.uint8 else 32767.5
    return (img.astype(np.float32) / scale), (mask > mthresh).astype(np.float32)


def load_dataset(manifest, splits: Sequence[str] = SPLITS) -> Dict[str, DataSplit]:
    """Load every requested split into memory, checking disjointness first."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.read(manifest)
    manifest.validate()
    out = {}
    size = None
    for name in splits:
        entries = manifest.split(name)
        imgs, masks = [], []
        for e in entries:
            img, mask = _load_pair(manifest.root, e, size)
            size = img.shape
            imgs.append(img)
            masks.append(mask)
        if entries:
            images = np.stack(imgs)[:, None]
            mask_arr = np.stack(masks)[:, None]
        else:
            images = np.zeros((0, 1, 1, 1), np.float32)
            mask_arr = np.zeros((0, 1, 1, 1), np.float32)
        out[name] = DataSplit(name, [e.id for e in entries], images, mask_arr)
    return out
