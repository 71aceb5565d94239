"""Image I/O and deterministic training/evaluation corpora."""

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .metrics import NoiseSpec
from .training import TrainingSample

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".pgm", ".npy")
BT601 = np.array([0.299, 0.587, 0.114])


def to_gray(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        if a.shape[2] in (3, 4):
            return a[..., :3] @ BT601
        if a.shape[2] == 1:
            return a[..., 0]
    if a.ndim != 2:
        raise ValueError(f"unsupported image shape {a.shape}")
    return a


def read_image(path) -> np.ndarray:
    """Read a PNG/PGM (8- or 16-bit, gray or RGB) or ``.npy`` file as float64 gray."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        return to_gray(np.load(path))
    with PILImage.open(path) as im:
        if im.mode in ("P", "PA"):
            im = im.convert("RGB")
        return to_gray(np.asarray(im))


def write_image(path, u: np.ndarray, scale: float = 1.0) -> None:
    """Write ``u * scale``.  ``.npy`` keeps float64; image formats clamp and round to 8 bits.

    Clamping and rounding happen here only, at encode time.
    """
    path = Path(path)
    u = np.asarray(u, dtype=np.float64) * scale
    tmp = path.with_name(path.name + ".tmp")
    if path.suffix.lower() == ".npy":
        with open(tmp, "wb") as fh:
            np.save(fh, u)
    else:
        img = PILImage.fromarray(np.clip(np.rint(u), 0, 255).astype(np.uint8), mode="L")
        fmt = "PPM" if path.suffix.lower() == ".pgm" else "PNG"
        img.save(tmp, format=fmt)
    os.replace(tmp, path)


def center_crop(a: np.ndarray, size: int) -> tuple[np.ndarray, int, int]:
    h, w = a.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    top, left = (h - size) // 2, (w - size) // 2
    return a[top : top + size, left : left + size].copy(), top, left


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class Provenance:
    filename: str
    top: int
    left: int
    seed: int


@dataclass
class Corpus:
    samples: list[TrainingSample] = field(default_factory=list)
    provenance: list[Provenance] = field(default_factory=list)
    noise: NoiseSpec | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def digest(self) -> str:
        h = hashlib.sha256()
        for s, p in zip(self.samples, self.provenance):
            h.update(f"{p.filename}\t{p.top}\t{p.left}\t{p.seed}\n".encode())
            h.update(np.ascontiguousarray(s.ground_truth, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(s.degraded, dtype="<f8").tobytes())
        return h.hexdigest()

    def manifest(self) -> str:
        lines = [f"# noise={self.noise.kind} level={self.noise.level:g} seed={self.noise.seed}"
                 if self.noise else "# noise=none"]
        lines += [f"{p.filename}\t{p.top}\t{p.left}\t{p.seed}" for p in self.provenance]
        return "\n".join(lines) + "\n"


def list_images(src_dir) -> list[Path]:
    src = Path(src_dir)
    if not src.is_dir():
        raise FileNotFoundError(f"not a directory: {src}")
    return sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def build_corpus(src_dir, crop: int, noise: NoiseSpec, limit: int | None = None,
                 seed: int | None = None) -> Corpus:
    """One centered ``crop x crop`` patch per image, in filename order, paired with noise.

    Each sample's noise seed is derived from ``(seed, index)``.  For Poisson
    noise the clean patch is rescaled to ``[0, peak]`` like the observation.
    Unreadable or too-small files are skipped with a warning.
    """
    seed = noise.seed if seed is None else seed
    corpus = Corpus(noise=NoiseSpec(noise.kind, noise.level, seed))
    if limit is not None and limit <= 0:
        return corpus
    for path in list_images(src_dir):
        if limit is not None and len(corpus) >= limit:
            break
        try:
            img = read_image(path)
        except Exception as exc:  # noqa: BLE001 - any decoder failure means skip
            log.warning("skipping unreadable %s: %s", path.name, exc)
            continue
        try:
            gt, top, left = center_crop(img, crop)
        except ValueError as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        s = sample_seed(seed, len(corpus))
        corpus.samples.append(TrainingSample(noise.clean(gt), noise.apply(gt, s)))
        corpus.provenance.append(Provenance(path.name, top, left, s))
    return corpus
