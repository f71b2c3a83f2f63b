"""Synthetic image pairs with exact ground-truth flow.

A base image becomes the source view; the target view is the base warped by a
homography ``H`` (source -> target).  Flow is stored target -> source: a
target pixel ``p`` holds ``H^-1 p - p``, the place to sample the source.
Images are float32 ``(H, W, 3)`` arrays in ``[0, 1]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage, ImageDraw
from scipy import ndimage

from .errors import ConfigurationError, GenerationError, IngestionError, MatrixError
from .flo import read_flo, write_flo

logger = logging.getLogger(__name__)

TIER_SHIFTS = {1: 0.05, 2: 0.10, 3: 0.15, 4: 0.20, 5: 0.25}
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".tif", ".tiff")


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def stack(self) -> np.ndarray:
        return np.stack([self.u, self.v], axis=-1)

    @classmethod
    def from_array(cls, uv: np.ndarray, valid: Optional[np.ndarray] = None) -> "FlowField":
        uv = np.asarray(uv, dtype=np.float32)
        if valid is None:
            valid = np.ones(uv.shape[:2], dtype=bool)
        return cls(uv[..., 0].copy(), uv[..., 1].copy(), np.asarray(valid, dtype=bool))


@dataclass
class HomographySpec:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) < 1e-12:
            raise MatrixError("H[2][2] is zero; cannot normalize")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-8:
            raise MatrixError(f"singular homography (det={np.linalg.det(m):.3g})")
        self.matrix = m

    def inverse(self) -> "HomographySpec":
        return HomographySpec(np.linalg.inv(self.matrix))

    def apply(self, x: np.ndarray, y: np.ndarray):
        m = self.matrix
        den = m[2, 0] * x + m[2, 1] * y + m[2, 2]
        return ((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / den,
                (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / den, den)


@dataclass
class PhotometricJitter:
    """Per-view brightness offset, contrast and gamma factors.

    Each field is a symmetric amplitude ``a`` (draw from ``[-a, a]``) or an
    explicit ``(lo, hi)`` range.  Contrast and gamma draws are offsets from 1.
    """

    brightness: float | tuple = 0.1
    contrast: float | tuple = 0.1
    gamma: float | tuple = 0.1
    on_source: bool = True
    on_target: bool = True

    @staticmethod
    def _draw(spec, rng):
        lo, hi = (-spec, spec) if np.isscalar(spec) else spec
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)

    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        b = self._draw(self.brightness, rng)
        c = 1.0 + self._draw(self.contrast, rng)
        g = 1.0 + self._draw(self.gamma, rng)
        out = np.clip(img, 0.0, 1.0) ** g
        mean = out.mean()
        out = (out - mean) * c + mean + b
        return np.clip(out, 0.0, 1.0).astype(np.float32)


NO_JITTER = PhotometricJitter(0.0, 0.0, 0.0, on_source=False, on_target=False)


@dataclass
class SyntheticPair:
    source: np.ndarray
    target: np.ndarray
    gt_flow: FlowField
    homography: HomographySpec
    pair_id: str = ""
    tier: int = 0
    clean_target: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def valid(self) -> np.ndarray:
        return self.gt_flow.valid


def homography_from_corners(src: np.ndarray, dst: np.ndarray) -> HomographySpec:
    """Four-point DLT with ``H[2][2] = 1``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (X, Y)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -X * x, -X * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -Y * x, -Y * y]
        b[2 * k], b[2 * k + 1] = X, Y
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise MatrixError("degenerate corner configuration") from exc
    return HomographySpec(np.append(h, 1.0).reshape(3, 3))


def frame_corners(size: tuple[int, int]) -> np.ndarray:
    h, w = size
    return np.array([[0, 0], [w, 0], [w, h], [0, h]], dtype=np.float64)


def homography_from_offsets(offsets: np.ndarray, size: tuple[int, int]) -> HomographySpec:
    """``offsets`` is ``(4, 2)`` corner displacements as fractions of (W, H)."""
    h, w = size
    src = frame_corners(size)
    dst = src + np.asarray(offsets, dtype=np.float64) * np.array([w, h])
    return homography_from_corners(src, dst)


def _convex(quad: np.ndarray) -> bool:
    signs = []
    for k in range(4):
        a, b, c = quad[k], quad[(k + 1) % 4], quad[(k + 2) % 4]
        u, v = b - a, c - b
        signs.append(u[0] * v[1] - u[1] * v[0])
    signs = np.array(signs)
    return bool(np.all(signs > 0) or np.all(signs < 0))


def sample_homography(rng: np.random.Generator, ranges=0.25,
                      size: tuple[int, int] = (64, 64), max_attempts: int = 100) -> HomographySpec:
    """Perturb the four frame corners by up to ``ranges`` x image size.

    ``ranges`` is a scalar or ``(rx, ry)``.  Draws are uniform in ``[-1, 1]``
    and scaled, so for a fixed generator state smaller ranges give a
    homography closer to the identity.
    """
    rx, ry = (ranges, ranges) if np.isscalar(ranges) else ranges
    for _ in range(max_attempts):
        unit = rng.uniform(-1.0, 1.0, size=(4, 2))
        offsets = unit * np.array([rx, ry])
        dst = frame_corners(size) + offsets * np.array([size[1], size[0]])
        if not _convex(dst):
            continue
        try:
            return homography_from_offsets(offsets, size)
        except MatrixError:
            continue
    raise GenerationError(f"no invertible homography after {max_attempts} attempts")


def gt_flow_from_homography(H: HomographySpec, size: tuple[int, int]) -> FlowField:
    """Target -> source flow for every target pixel of an ``size=(H, W)`` grid."""
    if not isinstance(H, HomographySpec):
        H = HomographySpec(H)
    hgt, wid = size
    ys, xs = np.mgrid[0:hgt, 0:wid].astype(np.float64)
    sx, sy, den = H.inverse().apply(xs, ys)
    valid = (den > 0) & (sx >= 0) & (sx <= wid - 1) & (sy >= 0) & (sy <= hgt - 1)
    u = np.where(np.isfinite(sx), sx - xs, 0.0).astype(np.float32)
    v = np.where(np.isfinite(sy), sy - ys, 0.0).astype(np.float32)
    return FlowField(u, v, valid)


def sample_image(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Bilinear lookup with border clamp; ``img`` is ``(H, W, C)``."""
    coords = np.stack([sy, sx])
    return np.stack([ndimage.map_coordinates(img[..., ch], coords, order=1, mode="nearest")
                     for ch in range(img.shape[-1])], axis=-1).astype(np.float32)


def warp_by_homography(base: np.ndarray, H: HomographySpec) -> tuple[np.ndarray, np.ndarray]:
    """Render the target view; pixels with no source support are zero."""
    flow = gt_flow_from_homography(H, base.shape[:2])
    ys, xs = np.mgrid[0:base.shape[0], 0:base.shape[1]].astype(np.float64)
    out = sample_image(base, xs + flow.u, ys + flow.v)
    out[~flow.valid] = 0.0
    return out, flow.valid


def render_pair(base: np.ndarray, H: HomographySpec, jitter: PhotometricJitter = NO_JITTER,
                rng: Optional[np.random.Generator] = None, pair_id: str = "", tier: int = 0) -> SyntheticPair:
    base = np.asarray(base, dtype=np.float32)
    rng = rng if rng is not None else np.random.default_rng(0)
    clean, _ = warp_by_homography(base, H)
    flow = gt_flow_from_homography(H, base.shape[:2])
    source = jitter.apply(base, rng) if jitter.on_source else base.copy()
    target = jitter.apply(clean, rng) if jitter.on_target else clean.copy()
    target[~flow.valid] = 0.0
    return SyntheticPair(source, target, flow, H, pair_id, tier, clean_target=clean)


# -- base images ------------------------------------------------------------

def _procedural(rng: np.random.Generator, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    for _ in range(rng.integers(3, 7)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(1.0, 8.0)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xs + np.sin(theta) * ys) + rng.uniform(0, 2 * np.pi))
        img += wave[..., None] * rng.uniform(-0.5, 0.5, size=3) * rng.uniform(0.3, 1.0)
    for sigma in (size / 32, size / 16, size / 8):
        noise = rng.normal(size=(size, size, 3))
        noise = np.stack([ndimage.gaussian_filter(noise[..., c], sigma, mode="wrap") for c in range(3)], -1)
        img += noise / (noise.std() + 1e-8) * rng.uniform(0.2, 0.8)
    img = (img - img.min()) / (np.ptp(img) + 1e-8)
    canvas = PILImage.fromarray((img * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(rng.integers(4, 10)):
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(size / 16, size / 4)
        n = rng.integers(3, 7)
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        pts = [(float(cx + r * np.cos(a)), float(cy + r * np.sin(a))) for a in ang]
        draw.polygon(pts, fill=tuple(int(x) for x in rng.integers(0, 256, size=3)))
    return np.asarray(canvas, dtype=np.float32) / 255.0


def _load_file(rng: np.random.Generator, directory, size: int) -> np.ndarray:
    directory = Path(directory) if directory is not None else None
    if directory is None or not directory.is_dir():
        raise IngestionError(f"image directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise IngestionError(f"no images in {directory}")
    return load_image(files[int(rng.integers(len(files)))], size)


def load_image(path, size: Optional[int] = None) -> np.ndarray:
    """Load RGB in ``[0, 1]``; with ``size``, center-crop square and resize."""
    try:
        img = PILImage.open(path).convert("RGB")
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    if size is not None:
        w, h = img.size
        s = min(w, h)
        left, top = (w - s) // 2, (h - s) // 2
        img = img.crop((left, top, left + s, top + s))
        if s != size:
            img = img.resize((size, size), PILImage.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def generate_base_image(rng: np.random.Generator, kind: str = "procedural", size: int = 64,
                        directory=None, min_contrast: float = 0.1) -> np.ndarray:
    if kind == "file":
        return _load_file(rng, directory, size)
    if kind != "procedural":
        raise ConfigurationError(f"unknown base image kind {kind!r}")
    img = _procedural(rng, size)
    std = img.std()
    if std < min_contrast:
        mean = img.mean()
        img = np.clip((img - mean) * (min_contrast / max(std, 1e-6)) + mean, 0.0, 1.0)
    return img.astype(np.float32)


def make_pair(seed: int, index: int, size: int = 64, tier: Optional[int] = None,
              jitter: PhotometricJitter = PhotometricJitter(), kind: str = "procedural",
              directory=None) -> SyntheticPair:
    """One pair from its own ``(seed, index)`` stream.

    ``tier=None`` draws the corner-perturbation magnitude uniformly in
    ``[0, 0.25]`` (training); a tier fixes it to ``TIER_SHIFTS[tier]``.
    """
    rng = np.random.default_rng([seed, index])
    base = generate_base_image(rng, kind, size, directory)
    shift = rng.uniform(0.0, TIER_SHIFTS[5]) if tier is None else TIER_SHIFTS[tier]
    H = sample_homography(rng, shift, (size, size))
    return render_pair(base, H, jitter, rng, pair_id=f"{seed}-{index}", tier=tier or 0)


# -- manifests --------------------------------------------------------------

@dataclass
class ManifestRecord:
    pair_id: str
    source: Path
    target: Path
    flow: Path
    mask: Path
    homography: np.ndarray
    tier: int

    def to_line(self, root: Path) -> str:
        rel = [str(Path(p).relative_to(root)) for p in (self.source, self.target, self.flow, self.mask)]
        hs = " ".join(f"{x:.17g}" for x in self.homography.ravel())
        return f"{self.pair_id} {' '.join(rel)} {hs} {self.tier}"


MANIFEST_HEADER = "# pair_id source target flow mask h00 h01 h02 h10 h11 h12 h20 h21 h22 tier"


def write_pair(pair: SyntheticPair, root) -> ManifestRecord:
    root = Path(root)
    pid = pair.pair_id
    rec = ManifestRecord(pid, root / "source" / f"{pid}.png", root / "target" / f"{pid}.png",
                         root / "flow" / f"{pid}.flo", root / "mask" / f"{pid}.png",
                         pair.homography.matrix, pair.tier)
    save_image(rec.source, pair.source)
    save_image(rec.target, pair.target)
    write_flo(rec.flow, pair.gt_flow.u, pair.gt_flow.v)
    rec.mask.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(pair.gt_flow.valid.astype(np.uint8) * 255).save(rec.mask)
    return rec


def generate_dataset(root, n_pairs: int, seed: int = 0, size: int = 64,
                     tiers: Sequence[int] = (1, 2, 3, 4, 5), jitter: PhotometricJitter = PhotometricJitter(),
                     kind: str = "procedural", directory=None) -> Path:
    """Write ``n_pairs`` pairs (tiers assigned round-robin) and a manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for i in range(n_pairs):
        tier = tiers[i % len(tiers)]
        pair = make_pair(seed, i, size, tier, jitter, kind, directory)
        pair.pair_id = f"p{i:05d}"
        lines.append(write_pair(pair, root).to_line(root))
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    logger.info("wrote %d pairs to %s", n_pairs, manifest)
    return manifest


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    root = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 15:
            raise IngestionError(f"{path}:{lineno}: expected 15 fields, got {len(parts)}")
        hom = np.array([float(x) for x in parts[5:14]]).reshape(3, 3)
        records.append(ManifestRecord(parts[0], *(root / p for p in parts[1:5]), hom, int(parts[14])))
    missing = [str(p) for r in records for p in (r.source, r.target, r.flow, r.mask) if not p.is_file()]
    if missing:
        raise IngestionError("missing files: " + ", ".join(missing))
    return records


def load_pair(rec: ManifestRecord) -> SyntheticPair:
    u, v = read_flo(rec.flow)
    valid = np.asarray(PILImage.open(rec.mask)) > 127
    return SyntheticPair(load_image(rec.source), load_image(rec.target), FlowField(u, v, valid),
                         HomographySpec(rec.homography), rec.pair_id, rec.tier)
