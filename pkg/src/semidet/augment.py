"""Weak/strong augmentation with exact geometric bookkeeping.

Every sample carries a ``ViewTransform`` whose 2x3 affine maps
original-image coordinates to view coordinates, so boxes can be
remapped exactly between any two views of the same image. Geometric ops
keep the canvas size fixed: scale jitter zooms about the image center,
rotation and shift warp in place with zero fill. Photometric ops touch
pixels only and are appended to the transform's log.

Images are single-channel float arrays in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox

MIN_BOX_AREA = 4.0


# ----------------------------------------------------------------- affines


def affine_identity() -> np.ndarray:
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=np.float64)


def affine_scale_about(cx: float, cy: float, s: float) -> np.ndarray:
    return np.array(
        [[s, 0.0, cx - s * cx], [0.0, s, cy - s * cy]], dtype=np.float64
    )


def affine_hflip(width: float) -> np.ndarray:
    return np.array([[-1.0, 0.0, width], [0.0, 1.0, 0.0]], dtype=np.float64)


def affine_rotate_about(cx: float, cy: float, angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array(
        [
            [c, -s, cx - c * cx + s * cy],
            [s, c, cy - s * cx - c * cy],
        ],
        dtype=np.float64,
    )


def affine_translate(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]], dtype=np.float64)


def affine_compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """outer(inner(p)) as a single 2x3 matrix."""
    out = np.empty((2, 3), dtype=np.float64)
    out[:, :2] = outer[:, :2] @ inner[:, :2]
    out[:, 2] = outer[:, :2] @ inner[:, 2] + outer[:, 2]
    return out


def affine_invert(m: np.ndarray) -> np.ndarray:
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    if abs(det) <= 1e-6:
        raise ValueError(f"affine is not invertible (det={det})")
    inv = np.empty((2, 3), dtype=np.float64)
    inv[0, 0] = m[1, 1] / det
    inv[0, 1] = -m[0, 1] / det
    inv[1, 0] = -m[1, 0] / det
    inv[1, 1] = m[0, 0] / det
    inv[:, 2] = -inv[:, :2] @ m[:, 2]
    return inv


def transform_boxes(boxes: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Map each box's four corners and return the enclosing boxes."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return boxes
    corners = np.stack(
        [
            boxes[:, [0, 1]],
            boxes[:, [2, 1]],
            boxes[:, [0, 3]],
            boxes[:, [2, 3]],
        ],
        axis=1,
    )  # (N, 4, 2)
    mapped = corners @ m[:, :2].T + m[:, 2]
    out = np.empty_like(boxes)
    out[:, 0] = mapped[:, :, 0].min(axis=1)
    out[:, 1] = mapped[:, :, 1].min(axis=1)
    out[:, 2] = mapped[:, :, 0].max(axis=1)
    out[:, 3] = mapped[:, :, 1].max(axis=1)
    return out


def warp_image(img: np.ndarray, m: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Inverse-warp bilinear resampling onto the same canvas."""
    if np.array_equal(m, affine_identity()):
        return img.copy()
    h, w = img.shape
    inv = affine_invert(m)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # pixel (i, j) has continuous center (j + 0.5, i + 0.5)
    px = xs + 0.5
    py = ys + 0.5
    sx = inv[0, 0] * px + inv[0, 1] * py + inv[0, 2] - 0.5
    sy = inv[1, 0] * px + inv[1, 1] * py + inv[1, 2] - 0.5
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(img.dtype)
    fy = (sy - y0).astype(img.dtype)
    out = np.full((h, w), fill, dtype=img.dtype)

    def sample(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.full((h, w), fill, dtype=img.dtype)
        vals[valid] = img[yy[valid], xx[valid]]
        return vals

    v00 = sample(y0, x0)
    v01 = sample(y0, x0 + 1)
    v10 = sample(y0 + 1, x0)
    v11 = sample(y0 + 1, x0 + 1)
    out = (
        v00 * (1 - fy) * (1 - fx)
        + v01 * (1 - fy) * fx
        + v10 * fy * (1 - fx)
        + v11 * fy * fx
    )
    return out.astype(img.dtype)


# ------------------------------------------------------------------- types


@dataclass
class ViewTransform:
    """Record of the geometry and photometry producing one training view."""

    affine: np.ndarray
    scaled_w: int
    scaled_h: int
    photometric_log: list = field(default_factory=list)
    cutout_regions: list = field(default_factory=list)


@dataclass
class AugmentedSample:
    image: np.ndarray  # (H, W) float in [0, 1]
    boxes: np.ndarray  # (N, 4) clipped to the view
    view: ViewTransform


def _finalize_boxes(boxes: np.ndarray, w: int, h: int) -> np.ndarray:
    """Clip to the view and drop slivers below MIN_BOX_AREA."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return boxes
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, h)
    areas = (out[:, 2] - out[:, 0]) * (out[:, 3] - out[:, 1])
    return out[areas >= MIN_BOX_AREA]


def compose_views(outer: ViewTransform, inner: ViewTransform) -> ViewTransform:
    """View of applying ``inner`` to the original then ``outer`` on top."""
    cutouts = [
        BBox(*map(float, transform_boxes(np.array([c.as_tuple()]), outer.affine)[0]))
        for c in inner.cutout_regions
    ]
    return ViewTransform(
        affine=affine_compose(outer.affine, inner.affine),
        scaled_w=outer.scaled_w,
        scaled_h=outer.scaled_h,
        photometric_log=list(inner.photometric_log) + list(outer.photometric_log),
        cutout_regions=cutouts + list(outer.cutout_regions),
    )


# -------------------------------------------------------------- photometry


def _smooth(img: np.ndarray) -> np.ndarray:
    """3x3 smoothing (weight 5 center, 1 elsewhere), border left intact."""
    k = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=img.dtype) / 13.0
    out = img.copy()
    acc = np.zeros_like(img[1:-1, 1:-1])
    for di in range(3):
        for dj in range(3):
            acc += k[di, dj] * img[di : di + img.shape[0] - 2, dj : dj + img.shape[1] - 2]
    out[1:-1, 1:-1] = acc
    return out


def apply_contrast(img, factor):
    mean = img.mean(dtype=img.dtype)
    return np.clip(mean + factor * (img - mean), 0.0, 1.0)


def apply_brightness(img, factor):
    return np.clip(img * img.dtype.type(factor), 0.0, 1.0)


def apply_solarize(img, threshold):
    return np.where(img >= threshold, 1.0 - img, img).astype(img.dtype)


def apply_sharpness(img, factor):
    smooth = _smooth(img)
    return np.clip(smooth + factor * (img - smooth), 0.0, 1.0)


def apply_posterize(img, bits):
    q = (img * 255.0).astype(np.uint8)
    keep = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return ((q & keep).astype(img.dtype)) / img.dtype.type(255.0)


def apply_equalize(img):
    q = (img * 255.0).astype(np.uint8)
    hist = np.bincount(q.ravel(), minlength=256)
    nonzero = hist[hist > 0]
    if nonzero.size <= 1:
        return img.copy()
    step = (hist.sum() - nonzero[-1]) // 255
    if step == 0:
        return img.copy()
    lut = (np.cumsum(hist) - hist + step // 2) // step
    lut = np.clip(lut, 0, 255).astype(np.uint8)
    return lut[q].astype(img.dtype) / img.dtype.type(255.0)


def apply_cutout(img, region: BBox, fill: float):
    out = img.copy()
    x1 = int(max(np.floor(region.x1), 0))
    y1 = int(max(np.floor(region.y1), 0))
    x2 = int(min(np.ceil(region.x2), img.shape[1]))
    y2 = int(min(np.ceil(region.y2), img.shape[0]))
    out[y1:y2, x1:x2] = fill
    return out


# --------------------------------------------------------------- profiles


@dataclass
class AugmentProfile:
    """Probabilities and ranges for the strong-augmentation column."""

    contrast_p: float = 0.0
    solarize_p: float = 0.0
    color_p: float = 0.0
    brightness_p: float = 0.0
    sharpness_p: float = 0.0
    posterize_p: float = 0.0
    equalize_p: float = 0.0
    rotate_p: float = 0.0
    rotate_max_deg: float = 30.0
    shift_p: float = 0.0
    shift_max_frac: float = 0.1
    cutout: bool = False
    cutout_ratio: tuple[float, float] = (0.05, 0.2)


PROFILES: dict[str, AugmentProfile] = {
    "labeled": AugmentProfile(
        contrast_p=0.2, solarize_p=0.1, color_p=0.1, brightness_p=0.1,
        sharpness_p=0.1, posterize_p=0.1, equalize_p=0.1,
    ),
    "unlabeled_student": AugmentProfile(
        contrast_p=0.2, solarize_p=0.1, color_p=0.1, brightness_p=0.1,
        sharpness_p=0.1, posterize_p=0.1, equalize_p=0.1,
        rotate_p=0.3, shift_p=0.3, cutout=True,
    ),
    "unlabeled_teacher": AugmentProfile(
        contrast_p=0.25, sharpness_p=0.25, equalize_p=0.25,
        rotate_p=0.3, shift_p=0.3,
    ),
}


# -------------------------------------------------------------- operations


def weak_augment(
    image: np.ndarray,
    boxes: np.ndarray,
    rng: np.random.Generator,
    scale_range: tuple[float, float] = (0.5, 1.5),
    flip_p: float = 0.5,
) -> AugmentedSample:
    """Scale jitter about the image center, then horizontal flip."""
    h, w = image.shape
    s = float(rng.uniform(*scale_range))
    m = affine_scale_about(w / 2.0, h / 2.0, s)
    if rng.random() < flip_p:
        m = affine_compose(affine_hflip(float(w)), m)
    img = warp_image(image, m)
    out_boxes = _finalize_boxes(transform_boxes(boxes, m), w, h)
    return AugmentedSample(img, out_boxes, ViewTransform(m, w, h))


def strong_augment(
    image: np.ndarray,
    boxes: np.ndarray,
    rng: np.random.Generator,
    profile: str | AugmentProfile,
) -> AugmentedSample:
    """Apply one strong-augmentation column to a (possibly weak-augmented)
    view: photometric jitters first, then rotation/shift, then cutout.
    """
    prof = PROFILES[profile] if isinstance(profile, str) else profile
    h, w = image.shape
    img = image
    log: list = []

    if prof.contrast_p and rng.random() < prof.contrast_p:
        f = float(rng.uniform(0.0, 1.0))
        img = apply_contrast(img, f)
        log.append(("contrast", f))
    if prof.solarize_p and rng.random() < prof.solarize_p:
        t = float(rng.uniform(0.0, 1.0))
        img = apply_solarize(img, t)
        log.append(("solarize", t))
    if prof.color_p and rng.random() < prof.color_p:
        # grayscale: color jitter degenerates to brightness o contrast
        bf = float(rng.uniform(0.6, 1.4))
        cf = float(rng.uniform(0.6, 1.4))
        img = apply_contrast(apply_brightness(img, bf), cf)
        log.append(("color", bf, cf))
    if prof.brightness_p and rng.random() < prof.brightness_p:
        f = float(rng.uniform(0.0, 1.0))
        img = apply_brightness(img, f)
        log.append(("brightness", f))
    if prof.sharpness_p and rng.random() < prof.sharpness_p:
        f = float(rng.uniform(0.0, 1.0))
        img = apply_sharpness(img, f)
        log.append(("sharpness", f))
    if prof.posterize_p and rng.random() < prof.posterize_p:
        bits = int(rng.integers(4, 8))
        img = apply_posterize(img, bits)
        log.append(("posterize", bits))
    if prof.equalize_p and rng.random() < prof.equalize_p:
        img = apply_equalize(img)
        log.append(("equalize",))

    m = affine_identity()
    if prof.rotate_p and rng.random() < prof.rotate_p:
        angle = float(rng.uniform(0.0, prof.rotate_max_deg))
        if rng.random() < 0.5:
            angle = -angle
        m = affine_compose(affine_rotate_about(w / 2.0, h / 2.0, angle), m)
    if prof.shift_p and rng.random() < prof.shift_p:
        dx = float(rng.uniform(-prof.shift_max_frac, prof.shift_max_frac) * w)
        dy = float(rng.uniform(-prof.shift_max_frac, prof.shift_max_frac) * h)
        m = affine_compose(affine_translate(dx, dy), m)
    if not np.array_equal(m, affine_identity()):
        img = warp_image(img, m)
    out_boxes = _finalize_boxes(transform_boxes(boxes, m), w, h)

    cutouts: list[BBox] = []
    if prof.cutout:
        rh = float(rng.uniform(*prof.cutout_ratio))
        rw = float(rng.uniform(*prof.cutout_ratio))
        ch, cw = rh * h, rw * w
        y1 = float(rng.uniform(0.0, h - ch))
        x1 = float(rng.uniform(0.0, w - cw))
        region = BBox(x1, y1, x1 + cw, y1 + ch)
        img = apply_cutout(img, region, float(image.mean()))
        cutouts.append(region)

    view = ViewTransform(m, w, h, photometric_log=log, cutout_regions=cutouts)
    return AugmentedSample(img.astype(image.dtype), out_boxes, view)


def map_boxes_keep(
    boxes: np.ndarray,
    from_view: ViewTransform,
    to_view: ViewTransform,
    min_area: float = MIN_BOX_AREA,
) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`map_boxes` but also returns surviving input indices."""
    m = affine_compose(to_view.affine, affine_invert(from_view.affine))
    out = transform_boxes(boxes, m)
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, to_view.scaled_w)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, to_view.scaled_h)
    if out.shape[0] == 0:
        return out, np.zeros(0, dtype=np.int64)
    areas = (out[:, 2] - out[:, 0]) * (out[:, 3] - out[:, 1])
    keep = np.nonzero(areas >= min_area)[0]
    return out[keep], keep


def map_boxes(
    boxes: np.ndarray,
    from_view: ViewTransform,
    to_view: ViewTransform,
    min_area: float = MIN_BOX_AREA,
) -> np.ndarray:
    """Remap boxes between two views of the same original image.

    Applies ``inverse(from)`` then ``to`` to each box's corners, returns
    clipped enclosing boxes, and drops boxes below ``min_area``.
    """
    return map_boxes_keep(boxes, from_view, to_view, min_area)[0]
