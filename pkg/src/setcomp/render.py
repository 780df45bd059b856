"""Ground-truth rendering: composes multi-class grayscale scenes from glyph exemplars.

Polarity convention is ink-dark: strokes near 0.0 on a background near 1.0.
Overlay mode combines constituents by pointwise minimum, which overlays ink
exactly under this polarity; grid mode places each class in its own cell.
All randomness flows through an explicit numpy Generator, so every render
is a pure function of (store, episode, label set, spec, seed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .labelsets import Episode, LabelSet, canonical_elements

GLYPH_SIZE = 64

OVERLAY_MIN = "overlay_min"
GRID_SCENE = "grid_scene"


@dataclass
class RenderSpec:
    """Free parameters of the rendering function.

    shift_frac:  max |translation| per axis, as a fraction of glyph width
    scale_range: uniform scale range (lo, hi]
    rot_deg:     max |rotation| in degrees
    noise_sigma: stddev of Gaussian pixel noise added after compositing
    mode:        "overlay_min" or "grid_scene" (grid_rows x grid_cols cells)
    """

    shift_frac: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)
    rot_deg: float = 15.0
    noise_sigma: float = 0.05
    mode: str = OVERLAY_MIN
    grid_rows: int = 1
    grid_cols: int = 1

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0.0 <= self.shift_frac <= 0.5:
            raise ValueError(f"shift_frac must be in [0, 0.5], got {self.shift_frac}")
        if not 0.0 < lo <= hi:
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if self.mode not in (OVERLAY_MIN, GRID_SCENE):
            raise ValueError(f"unknown render mode {self.mode!r}")
        if self.mode == GRID_SCENE and (self.grid_rows < 1 or self.grid_cols < 1):
            raise ValueError("grid dimensions must be >= 1")


@dataclass
class Scene:
    """Rendered image with its ground-truth label set.

    ``cells`` maps episode class index -> (row, col) in grid mode.
    """

    image: np.ndarray
    truth: LabelSet
    cells: dict[int, tuple[int, int]] | None = None

    def __post_init__(self):
        if len(self.truth) == 0:
            raise ValueError("scene truth must be nonempty")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("scene pixels must lie in [0, 1]")


@dataclass
class GlyphStore:
    """Per-class glyph exemplars, keyed by global catalog class id."""

    classes: dict[int, list[np.ndarray]]
    provenance: str = "unknown"
    class_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.classes:
            raise ValueError("glyph store has no classes")
        for cid, glyphs in self.classes.items():
            if not glyphs:
                raise ValueError(f"class {cid} has no exemplars")

    @property
    def class_ids(self) -> list[int]:
        return sorted(self.classes)

    def exemplar(self, class_id: int, index: int) -> np.ndarray:
        return self.classes[class_id][index]

    def n_exemplars(self, class_id: int) -> int:
        return len(self.classes[class_id])


def check_glyph(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.shape != (GLYPH_SIZE, GLYPH_SIZE):
        raise ValueError(f"glyph must be {GLYPH_SIZE}x{GLYPH_SIZE}, got {pixels.shape}")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError("glyph pixel values must lie in [0, 1]")
    return pixels


def load_glyph_store(root: str) -> GlyphStore:
    """Ingest a directory laid out as root/<class_name>/<exemplar>.png.

    Images are read as 8-bit grayscale, resized to 64x64, scaled to [0, 1].
    Class ids are assigned by sorted class directory name.
    """
    if not os.path.isdir(root):
        raise ValueError(f"glyph root {root!r} is not a directory")
    class_dirs = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not class_dirs:
        raise ValueError(f"glyph root {root!r} contains no class directories")
    classes: dict[int, list[np.ndarray]] = {}
    names: dict[int, str] = {}
    for cid, name in enumerate(class_dirs):
        cdir = os.path.join(root, name)
        files = sorted(f for f in os.listdir(cdir) if not f.startswith("."))
        glyphs = []
        for fname in files:
            path = os.path.join(cdir, fname)
            try:
                with Image.open(path) as im:
                    im = im.convert("L").resize((GLYPH_SIZE, GLYPH_SIZE), Image.BILINEAR)
                    glyphs.append(np.asarray(im, dtype=np.float32) / 255.0)
            except Exception as exc:
                raise ValueError(f"cannot ingest glyph file {path!r}: {exc}") from exc
        if not glyphs:
            raise ValueError(f"class directory {cdir!r} contains no images")
        classes[cid] = glyphs
        names[cid] = name
    return GlyphStore(classes, provenance=f"directory:{root}", class_names=names)


def _raster_strokes(strokes: list[np.ndarray], pen_radius: float = 1.0) -> np.ndarray:
    """Render polyline strokes as dark ink on a light background (64x64)."""
    yy, xx = np.mgrid[0:GLYPH_SIZE, 0:GLYPH_SIZE]
    pix = np.stack([xx, yy], axis=-1).astype(np.float64)
    dmin = np.full((GLYPH_SIZE, GLYPH_SIZE), np.inf)
    for pts in strokes:
        for p, q in zip(pts[:-1], pts[1:]):
            seg = q - p
            denom = max(float(seg @ seg), 1e-12)
            t = np.clip(((pix - p) @ seg) / denom, 0.0, 1.0)
            proj = p + t[..., None] * seg
            dmin = np.minimum(dmin, np.linalg.norm(pix - proj, axis=-1))
    # 1px antialiased edge around the pen radius
    return np.clip(dmin - (pen_radius - 0.5), 0.0, 1.0).astype(np.float32)


def synth_glyph_store(n_classes: int, n_exemplars: int, seed: int) -> GlyphStore:
    """Procedural glyph catalog: one random stroke skeleton per class.

    Each class is 3-6 random polyline strokes drawn with a ~2px pen;
    exemplars re-render the same skeleton with small control-point jitter.
    Fully determined by (n_classes, n_exemplars, seed).
    """
    if n_classes < 1 or n_exemplars < 1:
        raise ValueError("n_classes and n_exemplars must be >= 1")
    margin = 8.0
    classes: dict[int, list[np.ndarray]] = {}
    for cid in range(n_classes):
        srng = np.random.default_rng([seed, cid])
        n_strokes = int(srng.integers(3, 7))
        skeleton = []
        for _ in range(n_strokes):
            n_pts = int(srng.integers(2, 5))
            skeleton.append(srng.uniform(margin, GLYPH_SIZE - margin, size=(n_pts, 2)))
        glyphs = []
        for ex in range(n_exemplars):
            erng = np.random.default_rng([seed, cid, ex])
            jittered = [pts + erng.normal(0.0, 1.2, size=pts.shape) for pts in skeleton]
            glyphs.append(_raster_strokes(jittered))
        classes[cid] = glyphs
    return GlyphStore(classes, provenance=f"synthetic(seed={seed})")


def affine_jitter(glyph: np.ndarray, spec: RenderSpec, rng: np.random.Generator) -> np.ndarray:
    """Randomly shift, scale, and rotate a glyph about its center.

    Draw order is fixed (dx, dy, scale, rotation) so renders are
    reproducible from the generator state.  Out-of-frame area is filled
    with background (1.0); output stays 64x64.
    """
    glyph = np.asarray(glyph, dtype=np.float32)
    max_shift = spec.shift_frac * GLYPH_SIZE
    dx = float(rng.uniform(-max_shift, max_shift))
    dy = float(rng.uniform(-max_shift, max_shift))
    scale = float(rng.uniform(spec.scale_range[0], spec.scale_range[1]))
    theta = float(np.deg2rad(rng.uniform(-spec.rot_deg, spec.rot_deg)))
    if dx == 0.0 and dy == 0.0 and scale == 1.0 and theta == 0.0:
        return glyph.copy()
    center = (GLYPH_SIZE - 1) / 2.0
    c, s = np.cos(theta), np.sin(theta)
    forward = scale * np.array([[c, -s], [s, c]])
    inverse = np.linalg.inv(forward)
    # ndimage convention: input_coord = matrix @ output_coord + offset, axes (row, col)
    offset = np.array([center, center]) - inverse @ np.array([center + dy, center + dx])
    out = ndimage.affine_transform(glyph, inverse, offset=offset, order=1, mode="constant", cval=1.0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _finish(image: np.ndarray, spec: RenderSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.noise_sigma > 0.0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _pick_exemplar(store: GlyphStore, class_id: int, rng: np.random.Generator) -> int:
    return int(rng.integers(store.n_exemplars(class_id)))


def render_singleton(
    store: GlyphStore,
    class_id: int,
    spec: RenderSpec,
    rng: np.random.Generator,
    universe_size: int = 1,
    bit: int = 0,
    exemplar_id: int | None = None,
) -> Scene:
    """One jittered, noised render of a single class (the reference-example case)."""
    if exemplar_id is None:
        exemplar_id = _pick_exemplar(store, class_id, rng)
    img = affine_jitter(store.exemplar(class_id, exemplar_id), spec, rng)
    return Scene(_finish(img, spec, rng), LabelSet(1 << bit, universe_size))


def render_composite(
    store: GlyphStore,
    episode: Episode,
    t: LabelSet,
    spec: RenderSpec,
    rng: np.random.Generator,
) -> Scene:
    """Overlay-mode render: jittered constituents combined by pointwise min, plus noise."""
    if len(t) == 0:
        raise ValueError("cannot render an empty label set")
    if spec.mode != OVERLAY_MIN:
        raise ValueError(f"render_composite requires mode={OVERLAY_MIN!r}")
    layers = []
    for idx in canonical_elements(t):
        cid = episode.class_ids[idx]
        glyph = store.exemplar(cid, _pick_exemplar(store, cid, rng))
        layers.append(affine_jitter(glyph, spec, rng))
    image = np.minimum.reduce(layers)
    return Scene(_finish(image, spec, rng), t)


def render_scene(
    store: GlyphStore,
    episode: Episode,
    t: LabelSet,
    spec: RenderSpec,
    rng: np.random.Generator,
) -> Scene:
    """Grid-mode render: each class jittered into its own uniformly chosen cell."""
    if len(t) == 0:
        raise ValueError("cannot render an empty label set")
    if spec.mode != GRID_SCENE:
        raise ValueError(f"render_scene requires mode={GRID_SCENE!r}")
    n_cells = spec.grid_rows * spec.grid_cols
    elems = canonical_elements(t)
    if n_cells < len(elems):
        raise ValueError(f"{len(elems)} classes do not fit a {spec.grid_rows}x{spec.grid_cols} grid")
    canvas = np.ones((GLYPH_SIZE * spec.grid_rows, GLYPH_SIZE * spec.grid_cols), dtype=np.float32)
    chosen = rng.choice(n_cells, size=len(elems), replace=False)
    cells: dict[int, tuple[int, int]] = {}
    for idx, cell in zip(elems, chosen):
        r, c = divmod(int(cell), spec.grid_cols)
        cid = episode.class_ids[idx]
        glyph = store.exemplar(cid, _pick_exemplar(store, cid, rng))
        patch = affine_jitter(glyph, spec, rng)
        region = canvas[r * GLYPH_SIZE:(r + 1) * GLYPH_SIZE, c * GLYPH_SIZE:(c + 1) * GLYPH_SIZE]
        np.minimum(region, patch, out=region)
        cells[idx] = (r, c)
    return Scene(_finish(canvas, spec, rng), t, cells=cells)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize to size x size (used to feed scenes/windows to an encoder)."""
    img = Image.fromarray(np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0) * 255.0)
    out = np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0
    return np.clip(out, 0.0, 1.0)


def save_png(image: np.ndarray, path: str, metadata: dict[str, str] | None = None) -> None:
    """Write a [0,1] grayscale array as an 8-bit PNG, optionally with text metadata."""
    arr = np.clip(np.asarray(image, dtype=np.float64) * 255.0, 0, 255).round().astype(np.uint8)
    im = Image.fromarray(arr, mode="L")
    if metadata:
        from PIL.PngImagePlugin import PngInfo

        info = PngInfo()
        for key, val in metadata.items():
            info.add_text(key, val)
        im.save(path, pnginfo=info)
    else:
        im.save(path)
