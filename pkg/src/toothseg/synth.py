"""Procedural panoramic-phantom generator.

Produces stylized panoramic-radiograph lookalikes with exact ground truth:
two elliptical dental arches, 32 tooth positions with type-specific shapes
(narrow incisors, pointed canines, two-lobed premolars, wide multi-lobed
molars), per-tooth intensity texture over a noisy bone background, and the
optional distractors that define the ten radiograph categories (restorations,
orthodontic appliances, implants, supernumerary teeth, missing teeth).

The point is not radiographic realism but a corpus whose tooth-labeling task
is genuinely ambiguous without localization cues: arches shift, scale, and
tilt per image, and most images miss teeth, so nothing pins a tooth's
identity to a fixed pixel location.  Annotations (polygon, grid-snapped tight
box, FDI code) match the rendered shapes exactly, which makes the generator
usable as a ground-truth oracle for end-to-end tests.

Everything is deterministic given the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import DatasetManifest, ImageEntry, ToothAnnotation, largest_remainder, save_image, save_manifest
from .fdi import ALL_FDI_CODES, CATEGORIES, CATEGORY_USED_COUNTS, channel_of_fdi, is_valid_fdi, tooth_type
from .geometry import polygon_bbox, rasterize_polygon

MIN_RESOLUTION = 256

#: default category weights, proportional to the reference corpus composition
DEFAULT_CATEGORY_MIX = {cat: float(n) for cat, n in CATEGORY_USED_COUNTS.items()}

# tooth half-profiles in units of W/512 (width, height of the outline box)
_TOOTH_SIZE = {
    "incisor": (15.0, 50.0),
    "canine": (17.0, 54.0),
    "premolar": (20.0, 44.0),
    "molar": (25.0, 40.0),
}


@dataclass(frozen=True)
class PhantomConfig:
    """Recipe for one phantom.

    ``missing_teeth`` lists FDI codes absent from the mouth (categories 5 and
    7-10); for category 5 the first ``implant_count`` of them are replaced by
    rendered implants.  ``extra_teeth`` adds supernumerary duplicates
    (category 6) annotated with their neighbor's FDI code.
    """

    seed: int
    resolution: tuple = (512, 512)
    category: int = 4
    missing_teeth: tuple = ()
    implant_count: int = 0
    extra_teeth: int = 0
    noise_level: float = 0.03

    def __post_init__(self):
        h, w = self.resolution
        if h < MIN_RESOLUTION or w < MIN_RESOLUTION:
            raise ValueError(
                f"resolution {self.resolution} too small to place 32 teeth "
                f"(minimum {MIN_RESOLUTION}x{MIN_RESOLUTION}); render larger and resize"
            )
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category}")
        cat = CATEGORIES[self.category]
        for code in self.missing_teeth:
            if not is_valid_fdi(code):
                raise ValueError(f"invalid FDI code in missing_teeth: {code!r}")
        if len(set(self.missing_teeth)) != len(self.missing_teeth):
            raise ValueError("missing_teeth contains duplicates")
        if (self.implant_count > 0) != (self.category == 5):
            raise ValueError("implant_count > 0 exactly for category 5")
        if self.category == 5 and self.implant_count > len(self.missing_teeth):
            raise ValueError("category 5 needs a missing tooth position per implant")
        if (self.extra_teeth > 0) != (self.category == 6):
            raise ValueError("extra_teeth > 0 exactly for category 6")
        if cat.has_32_teeth and self.missing_teeth:
            raise ValueError(f"category {self.category} images show all 32 teeth")
        if self.category in (7, 8, 9, 10) and not self.missing_teeth:
            raise ValueError(f"category {self.category} images must miss at least one tooth")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")


def _ellipse_radius(theta, half_w, half_h):
    return (half_w * half_h) / np.sqrt((half_h * np.cos(theta)) ** 2 + (half_w * np.sin(theta)) ** 2)


def _tooth_polygon(kind, center, width, height, rotation, rng, n_vertices=28):
    """Radial outline polygon for one tooth; radial form keeps it simple.

    Local frame before rotation: +y is the crown direction.  Crown-side lobes
    encode the tooth type; the root side tapers.  A low-order harmonic
    perturbation varies individual teeth.
    """
    theta = np.linspace(0.0, 2.0 * np.pi, n_vertices, endpoint=False)
    r = _ellipse_radius(theta, width / 2.0, height / 2.0)
    crown = np.clip(np.sin(theta), 0.0, None)  # 1 at the crown tip, 0 on the root half
    if kind == "incisor":
        r *= 1.0 + 0.06 * crown**4
    elif kind == "canine":
        r *= 1.0 + 0.38 * crown**8
    elif kind == "premolar":
        r *= 1.0 + 0.16 * np.sin(2.0 * theta) ** 2 * crown
    else:  # molar
        r *= 1.0 + 0.13 * np.sin(3.0 * theta) ** 2 * crown
    root = np.clip(-np.sin(theta), 0.0, None)
    r *= 1.0 - 0.22 * root**2
    for m in (2, 3, 4):
        r *= 1.0 + rng.uniform(0.0, 0.03) * np.cos(m * theta + rng.uniform(0.0, 2.0 * np.pi))

    cos_a, sin_a = np.cos(rotation), np.sin(rotation)
    x = r * np.cos(theta)
    y = r * np.sin(theta)
    return np.stack(
        [center[0] + x * cos_a - y * sin_a, center[1] + x * sin_a + y * cos_a],
        axis=1,
    )


def _arch_slots(cx, cy0, half_w, half_h, deg_start, deg_end, n=16):
    """``n`` tooth centers along an elliptical arc, equally spaced by arc
    length (uniform angles would squeeze the end slots).  Returns the centers
    and the per-slot arc spacing."""
    phi = np.deg2rad(np.linspace(deg_start, deg_end, 512))
    x = cx + half_w * np.cos(phi)
    y = cy0 + half_h * np.sin(phi)
    seg = np.hypot(np.diff(x), np.diff(y))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    targets = (np.arange(n) + 0.5) / n * arc[-1]
    xs = np.interp(targets, arc, x)
    ys = np.interp(targets, arc, y)
    return np.stack([xs, ys], axis=1), arc[-1] / n


def _paint(image, mask, values):
    np.maximum(image, values, where=mask, out=image)


def _tooth_values(image_shape, mask, center, crown_dir, height, base, rng):
    """Constant base + gradient toward the crown, evaluated on mask pixels."""
    rows, cols = np.nonzero(mask)
    proj = ((cols + 0.5 - center[0]) * crown_dir[0] + (rows + 0.5 - center[1]) * crown_dir[1]) / (
        height / 2.0
    )
    vals = np.zeros(image_shape, dtype=np.float64)
    vals[rows, cols] = base + 0.10 * np.clip((proj + 1.0) / 2.0, 0.0, 1.0)
    return vals


def generate_phantom(config: PhantomConfig, image_id: str | None = None):
    """Render one phantom.

    Returns:
        (image, entry): float32 (H, W) image in [0, 1] and an
        :class:`ImageEntry` whose annotations exactly match the rendered
        teeth (one annotation per rendered tooth, duplicates for
        supernumerary extras).
    """
    rng = np.random.default_rng(config.seed)
    height, width = (int(v) for v in config.resolution)
    if image_id is None:
        image_id = f"phantom_seed{config.seed}"
    unit = width / 512.0
    cat = CATEGORIES[config.category]

    # global pose: arch center, scale, tilt
    cx = width * (0.5 + rng.uniform(-0.035, 0.035))
    cy = height * (0.52 + rng.uniform(-0.035, 0.035))
    scale = rng.uniform(0.86, 1.06)
    tilt = np.deg2rad(rng.uniform(-4.0, 4.0))

    upper_half_w = 0.37 * width * scale
    upper_half_h = 0.155 * height * scale
    upper_cy = cy - 0.175 * height * scale
    lower_half_w = 0.345 * width * scale
    lower_half_h = 0.145 * height * scale
    lower_cy = cy + 0.195 * height * scale

    # 16 slots per arch, outermost molar to outermost molar (image left to right)
    upper_slots, upper_gap = _arch_slots(cx, upper_cy, upper_half_w, upper_half_h, 198.0, 342.0)
    lower_slots, lower_gap = _arch_slots(cx, lower_cy, lower_half_w, lower_half_h, 162.0, 18.0)
    # image-left to image-right: Q1 pos 8..1, Q2 pos 1..8 (upper); Q4, Q3 (lower)
    upper_fdi = [18, 17, 16, 15, 14, 13, 12, 11, 21, 22, 23, 24, 25, 26, 27, 28]
    lower_fdi = [48, 47, 46, 45, 44, 43, 42, 41, 31, 32, 33, 34, 35, 36, 37, 38]

    slot_of = {}
    gap_of = {}
    crown_sign = {}  # +1: crown points down (upper arch)
    for k, fdi in enumerate(upper_fdi):
        slot_of[fdi] = upper_slots[k]
        gap_of[fdi] = upper_gap
        crown_sign[fdi] = +1.0
    for k, fdi in enumerate(lower_fdi):
        slot_of[fdi] = lower_slots[k]
        gap_of[fdi] = lower_gap
        crown_sign[fdi] = -1.0

    # per-tooth geometry, drawn for all 32 slots so layouts are comparable
    # across configs with different missing sets
    tooth_geom = {}
    for fdi in ALL_FDI_CODES:
        kind = tooth_type(fdi)
        w0, h0 = _TOOTH_SIZE[kind]
        tw = w0 * unit * scale * rng.uniform(0.9, 1.08)
        tw = min(tw, 0.92 * gap_of[fdi])  # lobes and tilt eat the remaining slack
        th = h0 * unit * scale * rng.uniform(0.9, 1.08)
        center = slot_of[fdi]
        flare = np.deg2rad(10.0) * (center[0] - cx) / max(upper_half_w, 1.0)
        rot = tilt + flare + np.deg2rad(rng.uniform(-4.0, 4.0))
        if crown_sign[fdi] < 0:
            rot += np.pi  # lower teeth: crown toward -y
        base = rng.uniform(0.60, 0.76)
        tooth_geom[fdi] = (kind, center, tw, th, rot, base)

    missing = set(config.missing_teeth)
    present = [f for f in ALL_FDI_CODES if f not in missing]
    implant_at = list(config.missing_teeth[: config.implant_count])

    # background: gradient + smooth bone texture + soft arch bands
    yy = np.linspace(-1.0, 1.0, height)[:, None]
    image = 0.30 + 0.04 * yy * np.ones((1, width))
    coarse = rng.uniform(-0.06, 0.06, size=(9, 9))
    image += np.asarray(
        np.kron(coarse, np.ones((height // 9 + 1, width // 9 + 1)))[:height, :width]
    )
    for cy0, hw, hh in ((upper_cy, upper_half_w, upper_half_h), (lower_cy, lower_half_w, lower_half_h)):
        gy, gx = np.mgrid[0:height, 0:width]
        d = ((gx - cx) / (hw * 1.25)) ** 2 + ((gy - cy0) / (hh * 2.6)) ** 2
        image += 0.08 * np.exp(-np.clip(d, 0.0, 12.0))

    annotations = []
    crown_tips = {}
    for fdi in present:
        kind, center, tw, th, rot, base = tooth_geom[fdi]
        polygon = _tooth_polygon(kind, center, tw, th, rot, rng)
        polygon[:, 0] = np.clip(polygon[:, 0], 0.0, width - 1e-3)
        polygon[:, 1] = np.clip(polygon[:, 1], 0.0, height - 1e-3)
        mask = rasterize_polygon(polygon, (height, width))
        crown_dir = (np.sin(rot) * -1.0, np.cos(rot))  # local +y mapped through rotation
        _paint(image, mask, _tooth_values(image.shape, mask, center, crown_dir, th, base, rng))
        crown_tips[fdi] = (center[0] + crown_dir[0] * th * 0.45, center[1] + crown_dir[1] * th * 0.45)
        annotations.append(
            ToothAnnotation(
                image_id=image_id,
                fdi=fdi,
                polygon=tuple(map(tuple, polygon)),
                bbox=polygon_bbox(polygon),
            )
        )
        if cat.has_restoration and rng.random() < 0.35:
            rr, cc = np.nonzero(mask)
            if rr.size:
                tipx, tipy = crown_tips[fdi]
                blob = ((np.arange(width)[None, :] - tipx) / (0.30 * tw)) ** 2 + (
                    (np.arange(height)[:, None] - tipy) / (0.22 * th)
                ) ** 2
                _paint(image, (blob < 1.0) & mask, np.full(image.shape, 0.95))

    # supernumerary duplicates: smaller copies wedged toward the occlusal gap
    for _ in range(config.extra_teeth):
        host = int(rng.choice(present))
        kind, center, tw, th, rot, base = tooth_geom[host]
        shift_y = crown_sign[host] * th * rng.uniform(0.55, 0.75)
        shift_x = tw * rng.uniform(-0.5, 0.5)
        dup_center = (center[0] + shift_x, center[1] + shift_y)
        polygon = _tooth_polygon(kind, dup_center, tw * 0.75, th * 0.7, rot, rng)
        polygon[:, 0] = np.clip(polygon[:, 0], 0.0, width - 1e-3)
        polygon[:, 1] = np.clip(polygon[:, 1], 0.0, height - 1e-3)
        mask = rasterize_polygon(polygon, (height, width))
        crown_dir = (np.sin(rot) * -1.0, np.cos(rot))
        _paint(image, mask, _tooth_values(image.shape, mask, dup_center, crown_dir, th * 0.7, base, rng))
        annotations.append(
            ToothAnnotation(
                image_id=image_id,
                fdi=host,  # nearest-code annotation; the 32-channel maps cannot do better
                polygon=tuple(map(tuple, polygon)),
                bbox=polygon_bbox(polygon),
            )
        )

    # implants: bright threaded posts where a tooth is gone
    for fdi in implant_at:
        kind, center, tw, th, rot, base = tooth_geom[fdi]
        polygon = _tooth_polygon("incisor", center, tw * 0.45, th * 1.05, rot, rng)
        mask = rasterize_polygon(polygon, (height, width))
        rows, cols = np.nonzero(mask)
        vals = np.zeros(image.shape)
        vals[rows, cols] = 0.96 - 0.06 * (np.sin(rows * 1.3) ** 2)  # faint thread bands
        _paint(image, mask, vals)

    # orthodontic appliance: arch wire through the crown tips plus brackets
    if cat.has_appliance:
        for arch_fdis in (upper_fdi, lower_fdi):
            tips = [crown_tips[f] for f in arch_fdis if f in crown_tips]
            if len(tips) >= 2:
                tips = np.asarray(tips)
                for a, b in zip(tips[:-1], tips[1:]):
                    n = max(int(np.hypot(*(b - a))), 2)
                    ts = np.linspace(0.0, 1.0, n)
                    px = np.clip((a[0] + ts * (b[0] - a[0])).astype(int), 0, width - 1)
                    py = np.clip((a[1] + ts * (b[1] - a[1])).astype(int), 0, height - 1)
                    for dy in (-1, 0, 1):
                        image[np.clip(py + dy, 0, height - 1), px] = np.maximum(
                            image[np.clip(py + dy, 0, height - 1), px], 0.88
                        )
                for tx, ty in tips:
                    r0, r1 = int(ty - 2 * unit), int(ty + 2 * unit)
                    c0, c1 = int(tx - 3 * unit), int(tx + 3 * unit)
                    if 0 <= r0 < r1 <= height and 0 <= c0 < c1 <= width:
                        image[r0:r1, c0:c1] = np.maximum(image[r0:r1, c0:c1], 0.90)

    image = gaussian_filter(image, sigma=1.0 * unit)
    if config.noise_level > 0:
        image = image + rng.normal(0.0, config.noise_level, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    entry = ImageEntry(
        image_id=image_id,
        file=f"images/{image_id}.png",
        width=width,
        height=height,
        category=config.category,
        annotations=tuple(annotations),
    )
    return image, entry


def _sample_config(category: int, rng, resolution, noise_level) -> PhantomConfig:
    """Draw the per-image variation for a category (missing set, implants, extras)."""
    missing = ()
    implants = 0
    extras = 0
    if category == 5:
        implants = int(rng.integers(1, 4))
        n_missing = implants + int(rng.integers(0, 3))
        missing = tuple(int(c) for c in rng.choice(ALL_FDI_CODES, size=n_missing, replace=False))
    elif category == 6:
        extras = int(rng.integers(1, 4))
    elif category in (7, 8, 9, 10):
        n_missing = int(rng.integers(1, 9))
        missing = tuple(int(c) for c in rng.choice(ALL_FDI_CODES, size=n_missing, replace=False))
    return PhantomConfig(
        seed=int(rng.integers(0, 2**31 - 1)),
        resolution=tuple(resolution),
        category=category,
        missing_teeth=missing,
        implant_count=implants,
        extra_teeth=extras,
        noise_level=noise_level,
    )


def generate_dataset(
    n: int,
    category_mix: dict | None = None,
    seed: int = 0,
    resolution=(512, 512),
    noise_level: float = 0.03,
):
    """Generate ``n`` phantoms with per-image derived seeds.

    ``category_mix`` maps category id -> weight; the default mirrors the
    reference corpus proportions.  Counts per category are apportioned by
    largest remainder, so the default mix at n=425 reproduces the corpus
    composition exactly.

    Returns:
        (manifest, images): manifest with one entry per phantom and a dict
        image_id -> float32 image.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    mix = dict(DEFAULT_CATEGORY_MIX if category_mix is None else category_mix)
    cats = sorted(c for c in mix if mix[c] > 0)
    for c in cats:
        if c not in CATEGORIES:
            raise ValueError(f"unknown category in mix: {c}")
    counts = largest_remainder([mix[c] for c in cats], n)
    categories = [c for c, k in zip(cats, counts) for _ in range(int(k))]
    master = np.random.default_rng(seed)
    master.shuffle(categories)

    children = np.random.SeedSequence(seed).spawn(n)
    entries = []
    images = {}
    for i, category in enumerate(categories):
        rng = np.random.default_rng(children[i])
        config = _sample_config(category, rng, resolution, noise_level)
        image_id = f"phantom_{i:05d}"
        image, entry = generate_phantom(config, image_id=image_id)
        entries.append(entry)
        images[image_id] = image
    return DatasetManifest(entries=entries), images


def write_dataset(root, manifest: DatasetManifest, images: dict) -> None:
    """Write the on-disk layout: images/<id>.png + annotations.json."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for entry in manifest.entries:
        save_image(images[entry.image_id], root / entry.file)
    save_manifest(manifest, root)
