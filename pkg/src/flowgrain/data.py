"""Dataset ingestion, deterministic downsampling, and the synthetic
grain-like corpus generator.

Images are 8-bit RGB. PPM (P6) is the dependency-free path and the
generator's default output; PNG is accepted through Pillow. Ground-truth
contaminant masks (PGM/PNG, 0 = clean, 255 = contaminant) are written
next to generated images for evaluation only; nothing in training reads
them.

Manifest format: one record per line, tab-separated
``path<TAB>source<TAB>split``, UTF-8, '#' comments; paths are resolved
relative to the manifest file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ChannelCountError, DataError, DecodeError, MissingFileError


@dataclass
class ImageRecord:
    id: str
    pixels: np.ndarray  # (H, W, 3) uint8
    source: str
    split: str


# ---------------------------------------------------------------------------
# image files


def write_ppm(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"PPM writer needs (H, W, 3), got {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_pgm(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ValueError(f"PGM writer needs (H, W), got {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _read_pnm_header(fh, magic, path):
    if fh.read(2) != magic:
        raise DecodeError(f"'{path}': not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        line = fh.readline()
        if not line:
            raise DecodeError(f"'{path}': truncated header")
        text = line.split(b"#", 1)[0]
        fields.extend(text.split())
    w, h, maxval = (int(v) for v in fields[:3])
    if maxval != 255:
        raise DecodeError(f"'{path}': only maxval 255 supported, got {maxval}")
    return w, h


def read_ppm(path):
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P6", path)
        data = fh.read(w * h * 3)
    if len(data) != w * h * 3:
        raise DecodeError(f"'{path}': truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path):
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P5", path)
        data = fh.read(w * h)
    if len(data) != w * h:
        raise DecodeError(f"'{path}': truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def read_image(path):
    """Decode an 8-bit RGB image (PPM native, anything else via Pillow)."""
    if not os.path.exists(path):
        raise MissingFileError(f"image file missing: '{path}'")
    if str(path).lower().endswith((".ppm", ".pnm")):
        return read_ppm(path)
    try:
        from PIL import Image
        with Image.open(path) as img:
            mode = img.mode
            if mode != "RGB":
                raise ChannelCountError(
                    f"'{path}': expected 3-channel RGB, got mode '{mode}'")
            return np.asarray(img, dtype=np.uint8)
    except ChannelCountError:
        raise
    except Exception as exc:
        raise DecodeError(f"'{path}': {exc}") from exc


def write_image(path, pixels):
    if str(path).lower().endswith((".ppm", ".pnm")):
        write_ppm(path, pixels)
        return
    from PIL import Image
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path)


# ---------------------------------------------------------------------------
# manifests


def read_manifest(path):
    """Rows of (absolute image path, source tag, split), manifest order."""
    if not os.path.exists(path):
        raise MissingFileError(f"manifest missing: '{path}'")
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(
                    f"manifest line {lineno}: expected 3 tab-separated "
                    f"fields, got {len(parts)}")
            rel, source, split = parts
            img_path = rel if os.path.isabs(rel) else os.path.join(base, rel)
            rows.append((img_path, source, split))
    return rows


def load_dataset(manifest_path, split=None):
    """Decode every manifest row into an ImageRecord, in manifest order."""
    records = []
    for img_path, source, row_split in read_manifest(manifest_path):
        if split is not None and row_split != split:
            continue
        pixels = read_image(img_path)
        rec_id = os.path.splitext(os.path.basename(img_path))[0]
        records.append(ImageRecord(id=rec_id, pixels=pixels, source=source,
                                   split=row_split))
    return records


def mask_path_for(image_path):
    """Generated masks live in a sibling ``masks/`` directory as PGM."""
    stem = os.path.splitext(os.path.basename(image_path))[0]
    return os.path.join(os.path.dirname(os.path.dirname(image_path)),
                        "masks", stem + ".pgm")


# ---------------------------------------------------------------------------
# downsampling


def downsample(image, factor=0.25):
    """4x4 block averaging per channel with round-half-up to 8-bit.

    Only the 25% regime is supported; dims must divide 4.
    """
    if factor != 0.25:
        raise ValueError(f"unsupported downsample factor {factor}; only 0.25")
    px = np.asarray(image)
    h, w = px.shape[:2]
    if h % 4 or w % 4:
        raise ValueError(f"dims {h}x{w} do not divide 4, output would be fractional")
    blocks = px.astype(np.uint32).reshape(h // 4, 4, w // 4, 4, 3)
    sums = blocks.sum(axis=(1, 3))
    return ((sums + 8) // 16).astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthConfig:
    """Generator settings. Geometry defaults fit full-scale 460x640
    imagery; pass smaller radii/counts for reduced-resolution corpora."""

    seed: int = 0
    splits: tuple = (("y2017", "train", 48), ("y2015", "test", 16))
    height: int = 460
    width: int = 640
    kernel_count: tuple = (480, 600)  # dense pile, little background visible
    kernel_radius: tuple = (14.0, 26.0)
    kernel_aspect: tuple = (0.5, 0.8)
    kernel_color: tuple = (222, 168, 62)
    color_jitter: tuple = (18, 22, 16)
    hue_shift_fraction: float = 0.0
    hue_shift_delta: tuple = (28, 52, -26)
    background: tuple = (30, 27, 24)
    background_noise: float = 5.0
    contamination: float = 0.15   # fraction of images receiving contaminants
    leaf_rate: float = 0.9        # Poisson means per contaminated image
    stick_rate: float = 0.7
    fragment_rate: float = 1.1
    chaff_rate: float = 0.9
    image_format: str = "ppm"     # or "png"

    def validate(self):
        if not 0.0 <= self.contamination <= 1.0:
            raise ValueError("contamination must be in [0, 1]")
        for tag, split, count in self.splits:
            if count < 1:
                raise ValueError(f"split ({tag}, {split}) needs count >= 1")
        if self.image_format not in ("ppm", "png"):
            raise ValueError(f"unknown image format '{self.image_format}'")


def _paint_ellipse(img, cx, cy, a, b, theta, color, shade=0.0, mask=None,
                   rng=None, speckle=0.0):
    h, w = img.shape[:2]
    r = int(np.ceil(max(a, b))) + 1
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    if y0 >= y1 or x0 >= x1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs - cx, ys - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    rho2 = u * u + v * v
    inside = rho2 <= 1.0
    if not inside.any():
        return
    shading = 1.0 - shade * rho2[inside]
    if speckle and rng is not None:
        shading = shading * rng.uniform(1.0 - speckle, 1.0 + speckle,
                                        size=int(inside.sum()))
    patch = np.clip(np.asarray(color, dtype=np.float64)[None, :]
                    * shading[:, None], 0, 255)
    img[y0:y1, x0:x1][inside] = patch.astype(np.uint8)
    if mask is not None:
        mask[y0:y1, x0:x1][inside] = 255


def _paint_strip(img, mask, cx, cy, length, halfwidth, theta, color, rng):
    h, w = img.shape[:2]
    r = int(np.ceil(length / 2 + halfwidth)) + 1
    y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
    if y0 >= y1 or x0 >= x1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs - cx, ys - cy
    ct, st = np.cos(theta), np.sin(theta)
    along = dx * ct + dy * st
    across = -dx * st + dy * ct
    inside = (np.abs(along) <= length / 2) & (np.abs(across) <= halfwidth)
    if not inside.any():
        return
    # vein streaks along the strip plus speckle so contaminants carry
    # texture instead of being low-complexity flat patches
    streak = 1.0 + 0.18 * np.sin(along[inside] * rng.uniform(1.0, 2.5)
                                 + rng.uniform(0, 2 * np.pi))
    speckle = rng.uniform(0.85, 1.15, size=int(inside.sum()))
    patch = np.clip(np.asarray(color, dtype=np.float64)[None, :]
                    * (streak * speckle)[:, None], 0, 255)
    img[y0:y1, x0:x1][inside] = patch.astype(np.uint8)
    mask[y0:y1, x0:x1][inside] = 255


def _jitter_color(base, jitter, rng):
    c = np.asarray(base, dtype=np.float64) + rng.uniform(-1, 1, 3) * np.asarray(jitter)
    return np.clip(c, 0, 255)


def render_synthetic_image(cfg, rng):
    """One image plus its contaminant mask, as a pure function of ``rng``."""
    h, w = cfg.height, cfg.width
    img = np.empty((h, w, 3), dtype=np.uint8)
    base = np.asarray(cfg.background, dtype=np.float64)
    noise = rng.normal(0.0, cfg.background_noise, (h, w, 3))
    img[...] = np.clip(base[None, None, :] + noise, 0, 255).astype(np.uint8)
    mask = np.zeros((h, w), dtype=np.uint8)

    hue_shifted = rng.random() < cfg.hue_shift_fraction
    palette = np.asarray(cfg.kernel_color, dtype=np.float64)
    if hue_shifted:
        palette = np.clip(palette + np.asarray(cfg.hue_shift_delta), 0, 255)

    n_kernels = int(rng.integers(cfg.kernel_count[0], cfg.kernel_count[1] + 1))
    for _ in range(n_kernels):
        a = rng.uniform(*cfg.kernel_radius)
        b = a * rng.uniform(*cfg.kernel_aspect)
        cx = rng.uniform(0, w)
        cy = rng.uniform(0, h)
        theta = rng.uniform(0, np.pi)
        color = _jitter_color(palette, cfg.color_jitter, rng)
        _paint_ellipse(img, cx, cy, a, b, theta, color, shade=0.3,
                       rng=rng, speckle=0.05)

    contaminated = rng.random() < cfg.contamination
    if contaminated:
        rbar = 0.5 * (cfg.kernel_radius[0] + cfg.kernel_radius[1])
        n_leaf = max(1, int(rng.poisson(cfg.leaf_rate)))
        n_stick = int(rng.poisson(cfg.stick_rate))
        n_frag = int(rng.poisson(cfg.fragment_rate))
        n_chaff = int(rng.poisson(cfg.chaff_rate))
        # contaminants are deliberately diverse in color and brightness
        # (real foreign material is); a tight contaminant mode would let
        # the density model absorb it as in-distribution
        for _ in range(n_leaf):
            base = _jitter_color((170, 148, 104), (30, 28, 24), rng)
            base = base * rng.uniform(0.6, 1.25)
            _paint_strip(img, mask, rng.uniform(0, w), rng.uniform(0, h),
                         rng.uniform(2.2, 4.5) * rbar,
                         rng.uniform(0.35, 0.6) * rbar,
                         rng.uniform(0, np.pi), np.clip(base, 0, 255), rng)
        for _ in range(n_stick):
            base = _jitter_color((110, 86, 56), (24, 20, 16), rng)
            base = base * rng.uniform(0.6, 1.3)
            _paint_strip(img, mask, rng.uniform(0, w), rng.uniform(0, h),
                         rng.uniform(3.0, 6.0) * rbar,
                         rng.uniform(0.12, 0.24) * rbar,
                         rng.uniform(0, np.pi), np.clip(base, 0, 255), rng)
        for _ in range(n_frag):
            a = rng.uniform(0.2, 0.4) * rbar
            _paint_ellipse(img, rng.uniform(0, w), rng.uniform(0, h),
                           a, a * rng.uniform(0.6, 1.0), rng.uniform(0, np.pi),
                           _jitter_color((248, 234, 168), (10, 14, 26), rng),
                           shade=0.15, mask=mask, rng=rng, speckle=0.1)
        for _ in range(n_chaff):
            a = rng.uniform(0.3, 0.6) * rbar
            _paint_ellipse(img, rng.uniform(0, w), rng.uniform(0, h),
                           a, a * rng.uniform(0.7, 1.0), rng.uniform(0, np.pi),
                           _jitter_color((226, 218, 192), (16, 16, 20), rng),
                           shade=0.1, mask=mask, rng=rng, speckle=0.12)
    return img, mask


def generate_synthetic_corpus(cfg, out_dir):
    """Write images, masks and a manifest under ``out_dir``; byte-identical
    for identical configs. Returns the list of manifest rows."""
    cfg.validate()
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    try:
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory: {exc}") from exc

    ext = ".ppm" if cfg.image_format == "ppm" else ".png"
    rows = []
    index = 0
    for tag, split, count in cfg.splits:
        for j in range(count):
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
            img, mask = render_synthetic_image(cfg, rng)
            stem = f"{tag}_{j:04d}"
            img_path = os.path.join(img_dir, stem + ext)
            write_image(img_path, img)
            write_pgm(os.path.join(mask_dir, stem + ".pgm"), mask)
            rows.append((os.path.join("images", stem + ext), tag, split))
            index += 1

    manifest_path = os.path.join(out_dir, "manifest.tsv")
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# path\tsource\tsplit\n")
        for rel, tag, split in rows:
            fh.write(f"{rel}\t{tag}\t{split}\n")
    return rows
