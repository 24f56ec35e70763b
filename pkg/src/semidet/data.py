"""Synthetic fracture-like dataset: generation, file I/O, splits.

Each image shows one elongated bright band (bone analog) on a noisy
dark background, interrupted by 1-3 darker transverse gaps (fracture
analog). Ground-truth boxes are the tight pixel bounds of each gap
region. Images are written as binary 8-bit PGM; the manifest is a
single JSON file with COCO-style images/annotations arrays plus split
lists. Everything is seed-deterministic down to the file bytes.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .augment import AugmentedSample, PROFILES, ViewTransform, affine_identity
from .augment import strong_augment, weak_augment, compose_views

MANIFEST_VERSION = 1


class DataError(ValueError):
    """Dataset file missing, corrupt, or inconsistent."""


@dataclass
class SynthParams:
    image_size: int = 128
    min_objects: int = 1
    max_objects: int = 3
    band_width: tuple[float, float] = (16.0, 28.0)
    band_intensity: tuple[float, float] = (0.5, 0.8)
    background: float = 0.15
    gap_len: tuple[float, float] = (10.0, 20.0)
    gap_depth: tuple[float, float] = (0.65, 0.95)
    noise_sigma: float = 0.05
    texture_amp: float = 0.05
    min_box_area: float = 16.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        kw = dict(d)
        for key in ("band_width", "band_intensity", "gap_len", "gap_depth"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class ImageEntry:
    id: int
    file_name: str
    width: int
    height: int


@dataclass
class AnnotationEntry:
    id: int
    image_id: int
    bbox: tuple[float, float, float, float]  # x1, y1, x2, y2
    class_id: int = 0


@dataclass
class DatasetManifest:
    images: list[ImageEntry]
    annotations: list[AnnotationEntry]
    labeled_ids: list[int] = field(default_factory=list)
    unlabeled_ids: list[int] = field(default_factory=list)
    seed: int = 0
    params: dict = field(default_factory=dict)
    root: str = "."

    def image_by_id(self, image_id: int) -> ImageEntry:
        for entry in self.images:
            if entry.id == image_id:
                return entry
        raise DataError(f"image id {image_id} not in manifest")

    def annotations_for(self, image_id: int) -> list[AnnotationEntry]:
        return [a for a in self.annotations if a.image_id == image_id]

    def boxes_for(self, image_id: int) -> np.ndarray:
        rows = [a.bbox for a in self.annotations_for(image_id)]
        if not rows:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array(rows, dtype=np.float64)

    def to_json_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "params": self.params,
            "images": [asdict(e) for e in self.images],
            "annotations": [
                {
                    "id": a.id,
                    "image_id": a.image_id,
                    "bbox": list(a.bbox),
                    "class_id": a.class_id,
                }
                for a in self.annotations
            ],
            "splits": {
                "labeled": list(self.labeled_ids),
                "unlabeled": list(self.unlabeled_ids),
            },
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, indent=1, sort_keys=False)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            with open(path, "r", encoding="utf-8") as f:
                d = json.load(f)
        except OSError as e:
            raise DataError(f"cannot read manifest {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise DataError(f"manifest {path} is not valid JSON: {e}") from e
        if d.get("version") != MANIFEST_VERSION:
            raise DataError(f"manifest {path}: unsupported version {d.get('version')}")
        return cls(
            images=[ImageEntry(**e) for e in d["images"]],
            annotations=[
                AnnotationEntry(
                    id=a["id"], image_id=a["image_id"],
                    bbox=tuple(a["bbox"]), class_id=a["class_id"],
                )
                for a in d["annotations"]
            ],
            labeled_ids=list(d["splits"]["labeled"]),
            unlabeled_ids=list(d["splits"]["unlabeled"]),
            seed=d["seed"],
            params=d.get("params", {}),
            root=os.path.dirname(os.fspath(path)) or ".",
        )


# ------------------------------------------------------------------ PGM I/O


def write_pgm(path, img_u8: np.ndarray) -> None:
    h, w = img_u8.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img_u8.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    data = raw[pos : pos + w * h]
    if len(data) != w * h:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# --------------------------------------------------------------- generation


def _render_image(rng: np.random.Generator, params: SynthParams):
    """One band with 1-3 gaps; returns (uint8 image, list of boxes)."""
    s = params.image_size
    ys, xs = np.meshgrid(
        np.arange(s, dtype=np.float64) + 0.5,
        np.arange(s, dtype=np.float64) + 0.5,
        indexing="ij",
    )
    theta = rng.uniform(0.0, math.pi)
    dx, dy = math.cos(theta), math.sin(theta)
    nx, ny = -dy, dx
    cx = s / 2.0 + rng.uniform(-0.15, 0.15) * s
    cy = s / 2.0 + rng.uniform(-0.15, 0.15) * s
    half = rng.uniform(*params.band_width) / 2.0
    band_val = rng.uniform(*params.band_intensity)

    proj_t = (xs - cx) * dx + (ys - cy) * dy
    proj_n = (xs - cx) * nx + (ys - cy) * ny
    band_mask = np.abs(proj_n) <= half
    edge = np.clip((half - np.abs(proj_n)) / 1.5 + 1.0, 0.0, 1.0)

    ripple = 1.0 + params.texture_amp * np.sin(
        proj_t / rng.uniform(6.0, 14.0) + rng.uniform(0.0, 2 * math.pi)
    )
    img = params.background + (band_val * ripple - params.background) * edge

    # place gaps along the in-image stretch of the band axis
    tmin, tmax = -s * 0.35, s * 0.35
    n_gaps = int(rng.integers(params.min_objects, params.max_objects + 1))
    centers: list[float] = []
    lengths: list[float] = []
    for _ in range(n_gaps):
        glen = rng.uniform(*params.gap_len)
        for _attempt in range(40):
            t0 = rng.uniform(tmin, tmax)
            if all(
                abs(t0 - tc) > (glen + gl) / 2.0 + 5.0
                for tc, gl in zip(centers, lengths)
            ):
                centers.append(t0)
                lengths.append(glen)
                break

    boxes: list[tuple[float, float, float, float]] = []
    for t0, glen in zip(centers, lengths):
        axial = np.abs(proj_t - t0) <= glen / 2.0
        region = axial & band_mask
        if not region.any():
            continue
        depth = rng.uniform(*params.gap_depth)
        img = np.where(region, img - depth * (img - params.background), img)
        ii, jj = np.nonzero(region)
        x1, x2 = float(jj.min()), float(jj.max() + 1)
        y1, y2 = float(ii.min()), float(ii.max() + 1)
        if (x2 - x1) * (y2 - y1) >= params.min_box_area:
            boxes.append((x1, y1, x2, y2))

    img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
    img_u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return img_u8, boxes


def generate(
    seed: int,
    n_images: int,
    params: SynthParams,
    out_dir,
    id_offset: int = 0,
    file_prefix: str = "img",
) -> DatasetManifest:
    """Render ``n_images`` PGM files plus a manifest in ``out_dir``.

    Regenerating with the same arguments reproduces identical bytes.
    Images with zero valid gaps are re-rolled from their own stream, so
    every image carries at least one annotation.
    """
    if n_images < 1:
        raise ValueError(f"n_images {n_images} < 1")
    out_dir = os.fspath(out_dir)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    images: list[ImageEntry] = []
    annotations: list[AnnotationEntry] = []
    ann_id = id_offset * 8  # disjoint annotation id ranges across calls
    children = np.random.SeedSequence([int(seed), 101]).spawn(n_images)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        img_u8, boxes = _render_image(rng, params)
        while not boxes:
            img_u8, boxes = _render_image(rng, params)
        image_id = id_offset + i
        file_name = f"images/{file_prefix}_{image_id:05d}.pgm"
        write_pgm(os.path.join(out_dir, file_name), img_u8)
        images.append(
            ImageEntry(image_id, file_name, params.image_size, params.image_size)
        )
        for box in boxes:
            annotations.append(AnnotationEntry(ann_id, image_id, box))
            ann_id += 1
    return DatasetManifest(
        images=images,
        annotations=annotations,
        seed=seed,
        params=params.to_dict(),
        root=out_dir,
    )


def split(manifest: DatasetManifest, labeled_fraction: float, seed: int) -> DatasetManifest:
    """Deterministic shuffled labeled/unlabeled split.

    Labeled count is floor(fraction * N) with a minimum of one image.
    Annotations of unlabeled images stay in the manifest but are masked
    from training batches.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction {labeled_fraction} outside (0, 1]")
    ids = [e.id for e in manifest.images]
    order = np.random.default_rng(
        np.random.SeedSequence([int(seed), 202])
    ).permutation(len(ids))
    k = max(1, int(math.floor(labeled_fraction * len(ids))))
    labeled = sorted(ids[i] for i in order[:k])
    unlabeled = sorted(ids[i] for i in order[k:])
    return DatasetManifest(
        images=manifest.images,
        annotations=manifest.annotations,
        labeled_ids=labeled,
        unlabeled_ids=unlabeled,
        seed=manifest.seed,
        params=manifest.params,
        root=manifest.root,
    )


# ------------------------------------------------------------------ loading


def load_image(manifest: DatasetManifest, image_id: int) -> np.ndarray:
    entry = manifest.image_by_id(image_id)
    img = read_pgm(os.path.join(manifest.root, entry.file_name))
    return (img.astype(np.float32) / np.float32(255.0))


def load_batch(
    manifest: DatasetManifest,
    ids: list[int],
    profile: str,
    rng: np.random.Generator,
    teacher_strong: bool = False,
) -> list[AugmentedSample]:
    """Decode, normalize to [0, 1], and augment a batch in id order.

    Profiles: ``labeled`` (weak + labeled strong column),
    ``unlabeled_student`` (weak + student strong column),
    ``unlabeled_teacher`` (weak only unless ``teacher_strong``),
    ``none`` (identity view, e.g. for evaluation).
    Boxes of images in the unlabeled split are always masked.
    """
    unlabeled = set(manifest.unlabeled_ids)
    samples: list[AugmentedSample] = []
    streams = rng.spawn(len(ids))
    for image_id, stream in zip(ids, streams):
        img = load_image(manifest, image_id)
        if image_id in unlabeled:
            boxes = np.zeros((0, 4), dtype=np.float64)
        else:
            boxes = manifest.boxes_for(image_id)
        h, w = img.shape
        if profile == "none":
            samples.append(
                AugmentedSample(img, boxes, ViewTransform(affine_identity(), w, h))
            )
            continue
        weak = weak_augment(img, boxes, stream)
        if profile == "labeled":
            strong = strong_augment(weak.image, weak.boxes, stream, PROFILES["labeled"])
        elif profile == "unlabeled_student":
            strong = strong_augment(
                weak.image, weak.boxes, stream, PROFILES["unlabeled_student"]
            )
        elif profile == "unlabeled_teacher":
            if not teacher_strong:
                samples.append(weak)
                continue
            strong = strong_augment(
                weak.image, weak.boxes, stream, PROFILES["unlabeled_teacher"]
            )
        else:
            raise ValueError(f"unknown augmentation profile {profile!r}")
        samples.append(
            AugmentedSample(
                strong.image, strong.boxes, compose_views(strong.view, weak.view)
            )
        )
    return samples
