"""Procedural bilateral knee radiographs with controllable KL severity.

Each knee is drawn inside a square window: a femur above and a tibia below a
dark joint band.  Severity narrows the band, adds marginal osteophytes,
brightens subchondral bone (sclerosis) and, for grades 3-4, tilts the joint
line.  A :class:`DomainProfile` then perturbs the intensity distribution to
emulate a different scanner/site.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .ingest import GrayImage, crop, minmax_normalize, resize_area, write_pgm

# Patient-left knee is drawn in the right half of the image (AP convention).
LEFT_KNEE_ON_IMAGE_RIGHT = True

CANVAS_WIDTH = 128
CANVAS_HEIGHT = 192
REFERENCE_WINDOW = 64
CROP_SIZE = 64
MASK_GRID = 16

OAI_WEIGHTS = (3493, 2319, 1595, 1177, 310)
TARGET_WEIGHTS = (335, 150, 199, 194, 297)

# Nominal cue values at integer severity 0..4, reference scale.  Cues are
# interpolated at a continuous latent severity (grade plus bounded jitter),
# so neighbouring grades overlap the way two readers' gradings do.
JOINT_SPACE = (12.0, 9.5, 7.0, 4.5, 2.0)
OSTEOPHYTE_COUNT = (0.0, 0.6, 1.6, 3.5, 5.5)
OSTEOPHYTE_RADIUS = (1.4, 1.6, 2.0, 2.6, 3.4)
SCLEROSIS_GAIN = (1.0, 1.05, 1.12, 1.22, 1.34)
DEFORMITY_SKEW = (0.0, 0.0, 0.0, 0.25, 0.5)
SEVERITY_JITTER = 0.45

AIR_LEVEL = 14.0
TISSUE_LEVEL = 62.0
BONE_LEVEL = 150.0
SENSOR_NOISE = 3.0
BLUR_SIGMA = 0.8
# Share of knees imaged with poor positioning: the condyles project over the
# plateau, washing out the joint band and subchondral contrast.
OBLIQUE_RATE = 0.35
OBLIQUE_FILL = (0.9, 1.0)


@dataclass(frozen=True)
class SeverityParams:
    grade: int
    joint_space_px: float
    osteophyte_count: int
    osteophyte_radius_px: float
    sclerosis_gain: float
    deformity_skew: float = 0.0

    def __post_init__(self):
        if self.grade not in range(5):
            raise ValueError(f"grade must be 0-4, got {self.grade}")
        if self.joint_space_px <= 0:
            raise ValueError("joint_space_px must be positive")
        if self.osteophyte_count < 0 or self.osteophyte_radius_px < 0:
            raise ValueError("osteophyte count and radius must be nonnegative")
        if self.sclerosis_gain < 1:
            raise ValueError("sclerosis_gain must be >= 1")

    @classmethod
    def for_grade(cls, grade: int, seed=0) -> "SeverityParams":
        """Draw concrete parameters for ``grade``.

        The same ``seed`` yields the same standard-normal jitter for every
        grade, so the joint space is strictly decreasing in grade at a fixed
        seed.
        """
        if grade not in range(5):
            raise ValueError(f"grade must be 0-4, got {grade}")
        rng = np.random.default_rng(_seed_words(seed, "severity"))
        z, u_count, z_rad, sign = rng.standard_normal(), rng.random(), rng.standard_normal(), \
            rng.choice((-1.0, 1.0))
        latent = grade + SEVERITY_JITTER * float(np.clip(z, -2.0, 2.0))
        at = lambda table: float(np.interp(latent, range(5), table))  # noqa: E731
        gap = JOINT_SPACE[0] + (JOINT_SPACE[-1] - JOINT_SPACE[0]) * latent / 4  # linear, extrapolates
        count = int(at(OSTEOPHYTE_COUNT) + u_count)
        if grade == 0:
            count = 0
        elif grade >= 2:
            count = max(count, 1)
        return cls(
            grade=grade,
            joint_space_px=max(0.8, gap),
            osteophyte_count=count,
            osteophyte_radius_px=at(OSTEOPHYTE_RADIUS) * (1 + 0.1 * float(np.clip(z_rad, -2, 2))),
            sclerosis_gain=max(1.0, at(SCLEROSIS_GAIN)),
            deformity_skew=float(sign) * at(DEFORMITY_SKEW) if grade >= 3 else 0.0,
        )


@dataclass(frozen=True)
class DomainProfile:
    name: str
    intensity_offset: float = 0.0
    contrast_scale: float = 1.0
    gamma: float = 1.0
    noise_sigma: float = 0.0
    vignette_strength: float = 0.0

    def __post_init__(self):
        if self.contrast_scale <= 0 or self.gamma <= 0:
            raise ValueError("contrast_scale and gamma must be positive")
        if self.noise_sigma < 0 or self.vignette_strength < 0:
            raise ValueError("noise_sigma and vignette_strength must be nonnegative")


IDENTITY = DomainProfile("identity")
PROFILES = {
    "identity": IDENTITY,
    "source": DomainProfile("source", noise_sigma=2.0),
    "target": DomainProfile("target", intensity_offset=30.0, contrast_scale=0.7, gamma=2.0,
                            noise_sigma=9.0, vignette_strength=0.8),
}


def get_profile(profile) -> DomainProfile:
    if isinstance(profile, DomainProfile):
        return profile
    if isinstance(profile, dict):
        return DomainProfile(**profile)
    try:
        return PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown domain profile {profile!r}; known: {sorted(PROFILES)}") from None


@dataclass
class KneeAnnotation:
    side: str
    box: tuple[float, float, float, float]   # normalized (cx, cy, w, h)
    mask: np.ndarray = field(repr=False)     # full-resolution bool raster
    grade: int
    predicted: bool = False

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got {self.side!r}")
        if self.grade not in range(5):
            raise ValueError(f"grade must be 0-4, got {self.grade}")
        if self.box[2] <= 0 or self.box[3] <= 0:
            raise ValueError("box must be non-empty")

    def pixel_box(self, width: int, height: int) -> tuple[int, int, int, int]:
        cx, cy, w, h = self.box
        return (int(round((cx - w / 2) * width)), int(round((cy - h / 2) * height)),
                int(round((cx + w / 2) * width)), int(round((cy + h / 2) * height)))

    def to_json(self, width: int, height: int) -> dict:
        return {
            "side": self.side,
            "box": [float(v) for v in self.box],
            "pixel_box": list(self.pixel_box(width, height)),
            "grade": int(self.grade),
            "mask_pixels": int(self.mask.sum()),
            "predicted": self.predicted,
        }


@dataclass
class SyntheticSample:
    image: GrayImage
    left: KneeAnnotation
    right: KneeAnnotation
    seed: tuple = ()

    @property
    def knees(self) -> tuple[KneeAnnotation, KneeAnnotation]:
        return (self.left, self.right)


def _seed_words(seed, *parts) -> list[int]:
    """Stable 32-bit words for SeedSequence from an arbitrary seed tuple."""
    text = json.dumps([seed if not isinstance(seed, tuple) else list(seed), *parts])
    digest = hashlib.sha256(text.encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def derive_rng(seed, *parts) -> np.random.Generator:
    return np.random.default_rng(_seed_words(seed, *parts))


# ------------------------------------------------------------------ drawing

def _draw_knee(canvas: np.ndarray, mask: np.ndarray, params: SeverityParams, x0: int, y0: int,
               size: int, rng: np.random.Generator, oblique: Optional[bool] = None) -> None:
    """Draw bones for one knee into the ``size``-square window at (x0, y0).

    ``oblique`` forces (True) or suppresses (False) poor positioning; by
    default it is drawn with probability OBLIQUE_RATE.
    """
    f = size / REFERENCE_WINDOW
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-1.5, 1.5) * f
    joint_y = size / 2 + rng.uniform(-2.0, 2.0) * f
    half_femur, half_tibia = rng.uniform(17, 20) * f, rng.uniform(19, 22) * f
    drawn = rng.random() < OBLIQUE_RATE
    fill = rng.uniform(*OBLIQUE_FILL)   # always consumed so the stream does not depend on `oblique`
    if not (drawn if oblique is None else oblique):
        fill = 0.0

    rel = (xx - cx) / half_tibia
    gap = np.maximum(params.joint_space_px * f * (1 + params.deformity_skew * rel), 0.6 * f)
    femur_bottom = joint_y - gap / 2
    tibia_top = joint_y + gap / 2

    corner = 6 * f
    femur = (np.abs(xx - cx) < half_femur) & (yy < femur_bottom)
    # round the condyle corners
    dx = np.abs(xx - cx) - (half_femur - corner)
    dy = yy - (femur_bottom - corner)
    femur &= ~((dx > 0) & (dy > 0) & (dx * dx + dy * dy > corner * corner))
    tibia = (np.abs(xx - cx) < half_tibia) & (yy > tibia_top)
    dx = np.abs(xx - cx) - (half_tibia - corner / 2)
    dy = (tibia_top + corner / 2) - yy
    tibia &= ~((dx > 0) & (dy > 0) & (dx * dx + dy * dy > (corner / 2) ** 2))

    bone = femur | tibia
    texture = gaussian_filter(rng.standard_normal((size, size)), 2.0 * f) * 25.0
    level = BONE_LEVEL + texture
    near_joint = (femur & (femur_bottom - yy < 6 * f)) | (tibia & (yy - tibia_top < 6 * f))
    level = np.where(near_joint, level * (1 + (params.sclerosis_gain - 1) * (1 - fill)), level)

    spurs = np.zeros_like(bone)
    if params.osteophyte_count and params.osteophyte_radius_px > 0:
        sites = [(-1, -1), (1, -1), (-1, 1), (1, 1)]  # (medial/lateral, femur/tibia)
        for k in range(params.osteophyte_count):
            sx, sy = sites[rng.integers(4)] if k >= 4 else sites[k]
            half = half_femur if sy < 0 else half_tibia
            ox = cx + sx * (half + rng.uniform(-0.5, 1.0) * f)
            edge = joint_y + sy * params.joint_space_px * f / 2
            oy = edge + sy * rng.uniform(1.0, 3.5) * f
            r = params.osteophyte_radius_px * f * rng.uniform(0.85, 1.15)
            spurs |= (xx - ox) ** 2 + (yy - oy) ** 2 <= r * r
        spurs &= ~bone
        # a spur never bridges the joint band
        spurs &= (yy < joint_y - 0.5 * params.joint_space_px * f) | (yy > joint_y + 0.5 * params.joint_space_px * f)

    window = canvas[y0:y0 + size, x0:x0 + size]
    if fill:
        band = (np.abs(xx - cx) < half_femur) & ~bone & (yy > joint_y - size / 4) & (yy < joint_y + size / 4)
        window[band] += fill * (level[band] - window[band])
    window[bone] = level[bone]
    # superimposed condyles also hide the spurs in an oblique view
    spur_level = BONE_LEVEL * params.sclerosis_gain * 1.05
    window[spurs] += (1 - fill) * (spur_level - window[spurs])
    mask[y0:y0 + size, x0:x0 + size] |= bone | spurs


def _draw_leg(canvas: np.ndarray, center_x: float, width: float) -> None:
    xx = np.arange(canvas.shape[1])[None, :]
    profile = np.clip(1 - ((xx - center_x) / (width / 2)) ** 2, 0, None) ** 0.5
    canvas += (TISSUE_LEVEL - AIR_LEVEL) * profile


def _finish(canvas: np.ndarray, rng: np.random.Generator, scale: float = 1.0) -> GrayImage:
    img = gaussian_filter(canvas, BLUR_SIGMA * scale, mode="nearest")
    img = img + rng.standard_normal(img.shape) * SENSOR_NOISE
    return GrayImage(np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), 8, "synthetic")


def render_knee(params: SeverityParams, seed=0, size: int = REFERENCE_WINDOW,
                oblique: Optional[bool] = None) -> tuple[GrayImage, np.ndarray]:
    """Render a single knee window; returns the image and its bone mask."""
    if params.joint_space_px * size / REFERENCE_WINDOW >= size * 0.8:
        raise ValueError(f"joint space {params.joint_space_px}px does not fit a {size}px window")
    rng = derive_rng(seed, "knee")
    canvas = np.full((size, size), AIR_LEVEL)
    _draw_leg(canvas, size / 2, size * 0.9)
    mask = np.zeros((size, size), dtype=bool)
    _draw_knee(canvas, mask, params, 0, 0, size, rng, oblique)
    return _finish(canvas, rng, size / REFERENCE_WINDOW), mask


def compose_bilateral(left: SeverityParams, right: SeverityParams, seed=0,
                      canvas_size: tuple[int, int] = (CANVAS_WIDTH, CANVAS_HEIGHT)) -> SyntheticSample:
    """Place two knees side by side on one AP canvas of (width, height)."""
    width, height = canvas_size
    half = width // 2
    rng = derive_rng(seed, "bilateral")
    base = rng.uniform(0.8, 1.0)
    canvas = np.full((height, width), AIR_LEVEL) + np.linspace(0, 6, height)[:, None]
    mask_all = {}
    annotations = {}
    for side, params in (("left", left), ("right", right)):
        size = int(round(REFERENCE_WINDOW * base * rng.uniform(0.96, 1.0)))
        if size > half or size + 16 > height:
            raise ValueError(f"canvas {canvas_size} too small for a {size}px knee window")
        on_right = (side == "left") == LEFT_KNEE_ON_IMAGE_RIGHT
        x_lo = half if on_right else 0
        x0 = x_lo + int(rng.integers(0, half - size + 1))
        y0 = int(rng.integers(8, height - size - 8 + 1))
        _draw_leg(canvas, x0 + size / 2, size * 0.9)
        mask = np.zeros((height, width), dtype=bool)
        _draw_knee(canvas, mask, params, x0, y0, size, derive_rng(seed, "knee", side))
        mask_all[side] = mask
        box = ((x0 + size / 2) / width, (y0 + size / 2) / height, size / width, size / height)
        annotations[side] = KneeAnnotation(side, box, mask, params.grade)
    image = _finish(canvas, rng, base)
    return SyntheticSample(image, annotations["left"], annotations["right"],
                           tuple(seed) if isinstance(seed, (list, tuple)) else (seed,))


def apply_domain(img: GrayImage, profile: DomainProfile, seed=0) -> GrayImage:
    """Gamma, contrast, offset, additive noise and radial vignette, then clamp."""
    profile = get_profile(profile)
    top = 2 ** img.bit_depth - 1
    x = img.pixels.astype(np.float64) / top
    out = np.power(x, profile.gamma) * profile.contrast_scale * top + profile.intensity_offset * top / 255
    if profile.noise_sigma:
        out = out + derive_rng(seed, "domain").standard_normal(out.shape) * profile.noise_sigma * top / 255
    if profile.vignette_strength:
        h, w = out.shape
        yy, xx = np.mgrid[0:h, 0:w]
        r2 = ((yy - (h - 1) / 2) / (h / 2)) ** 2 + ((xx - (w - 1) / 2) / (w / 2)) ** 2
        out = out - profile.vignette_strength * top * r2 / 2
    out = np.clip(np.floor(out + 0.5), 0, top)
    return GrayImage(out.astype(img.pixels.dtype), img.bit_depth, img.source)


# ------------------------------------------------------------------ datasets

def _normalized_weights(weights: Optional[Sequence[float]]) -> np.ndarray:
    w = np.ones(5) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (5,) or np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
        raise ValueError(f"grade weights must be 5 nonnegative numbers, not all zero: {weights}")
    return w / w.sum()


def sample_dataset(n: int, grade_weights: Optional[Sequence[float]] = None, profile="source",
                   seed: int = 0) -> list[SyntheticSample]:
    """Draw ``n`` bilateral samples with i.i.d. grades per knee."""
    p = _normalized_weights(grade_weights)
    profile = get_profile(profile)
    out = []
    for i in range(n):
        rng = derive_rng(seed, "grades", i)
        gl, gr = (int(g) for g in rng.choice(5, size=2, p=p))
        sample = compose_bilateral(SeverityParams.for_grade(gl, (seed, i, "left")),
                                   SeverityParams.for_grade(gr, (seed, i, "right")), (seed, i))
        sample.image = apply_domain(sample.image, profile, (seed, i))
        out.append(sample)
    return out


def grade_draws(n: int, grade_weights: Optional[Sequence[float]], seed: int) -> np.ndarray:
    """The left-knee grades ``sample_dataset`` would draw, without rendering."""
    p = _normalized_weights(grade_weights)
    return np.array([int(derive_rng(seed, "grades", i).choice(5, size=2, p=p)[0]) for i in range(n)])


@dataclass
class KneeCrop:
    """A normalized, resized single-knee crop ready for the grader."""

    pixels: np.ndarray      # (CROP_SIZE, CROP_SIZE) float in [0, 255]
    grade: int
    side: str
    sample_index: int


def prepare_crop(img: GrayImage, pixel_box: tuple[int, int, int, int]) -> np.ndarray:
    """crop -> min-max normalize -> area resize to the grader input size."""
    cut = minmax_normalize(crop(img, pixel_box))
    return resize_area(cut.pixels, CROP_SIZE, CROP_SIZE)


def jitter_box(box: tuple[int, int, int, int], sigma: float, rng: np.random.Generator
               ) -> tuple[int, int, int, int]:
    """Move each edge by a rounded N(0, sigma) pixel offset (clipped at 3 sigma), keeping >= 8 px per side."""
    d = np.rint(np.clip(rng.normal(0.0, sigma, 4), -3 * sigma, 3 * sigma)).astype(int)
    x0, y0, x1, y1 = (int(v) + int(o) for v, o in zip(box, d))
    return x0, y0, max(x1, x0 + 8), max(y1, y0 + 8)


def knee_crops(samples: Sequence[SyntheticSample], start_index: int = 0, jitter: float = 0.0,
               seed: int = 0) -> list[KneeCrop]:
    """Ground-truth crops; ``jitter`` > 0 perturbs each box to mimic localization error."""
    out = []
    for i, s in enumerate(samples):
        for ann in s.knees:
            box = ann.pixel_box(s.image.width, s.image.height)
            if jitter > 0:
                box = jitter_box(box, jitter, derive_rng(seed, "jitter", start_index + i, ann.side))
            out.append(KneeCrop(prepare_crop(s.image, box), ann.grade, ann.side, start_index + i))
    return out


def sample_crops(n: int, grade_weights=None, profile="source", seed: int = 0) -> list[KneeCrop]:
    """``n`` ground-truth knee crops, two per generated bilateral image."""
    samples = sample_dataset((n + 1) // 2, grade_weights, profile, seed)
    return knee_crops(samples)[:n]


def mask_grid(mask: np.ndarray, pixel_box: tuple[int, int, int, int], cells: int = MASK_GRID) -> np.ndarray:
    """Coarse occupancy of ``mask`` inside ``pixel_box``: cell set if >= half covered."""
    x0, y0, x1, y1 = pixel_box
    window = np.zeros((y1 - y0, x1 - x0))
    sy0, sx0 = max(0, y0), max(0, x0)
    sy1, sx1 = min(mask.shape[0], y1), min(mask.shape[1], x1)
    window[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = mask[sy0:sy1, sx0:sx1]
    return resize_area(window, cells, cells) >= 0.5


def histogram(img: GrayImage, bins: int = 64) -> np.ndarray:
    top = 2 ** img.bit_depth
    h, _ = np.histogram(img.pixels, bins=bins, range=(0, top))
    return h / h.sum()


def write_dataset(samples: Sequence[SyntheticSample], out_dir, *, seed: int, profile,
                  grade_weights=None) -> dict:
    """Write PGM images, per-sample JSON sidecars, and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"sample_{i:05d}"
        write_pgm(s.image, out / f"{stem}.pgm")
        sidecar = {
            "image": f"{stem}.pgm",
            "width": s.image.width,
            "height": s.image.height,
            "seed": list(s.seed),
            "knees": [k.to_json(s.image.width, s.image.height) for k in s.knees],
        }
        (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        # full-resolution bone masks as a label image: 1 = left knee, 2 = right knee
        labels = np.zeros(s.image.pixels.shape, dtype=np.uint8)
        labels[s.left.mask] = 1
        labels[s.right.mask] = 2
        write_pgm(GrayImage(labels, 8, "synthetic"), out / f"{stem}_mask.pgm")
        entries.append({"image": f"{stem}.pgm", "annotation": f"{stem}.json", "mask": f"{stem}_mask.pgm",
                        "seed": list(s.seed)})
    manifest = {
        "version": 1,
        "count": len(entries),
        "seed": seed,
        "profile": asdict(get_profile(profile)),
        "grade_weights": None if grade_weights is None else [float(w) for w in grade_weights],
        "side_convention": "patient-left knee in image-right half" if LEFT_KNEE_ON_IMAGE_RIGHT
        else "patient-left knee in image-left half",
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
