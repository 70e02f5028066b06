"""Synthetic speckled scenes, COCO-style annotation I/O and PGM image I/O.

Layout on disk::

    root/<split>/images/000000.pgm
    root/<split>/annotations.json
    root/<split>/ledger.json      # per-class instance counts at generation time
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .errors import DataError, FormatError, IntegrityError

CLASS_NAMES = ("aircraft", "ship", "car", "bridge", "tank", "harbor")


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------

def encode_pgm(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError(f"PGM needs a 2D uint8 array, got {arr.dtype} {arr.shape}")
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def write_pgm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(pixels))


def decode_pgm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if raw[:2] != b"P5":
        raise FormatError(f"{source}: not a binary PGM (magic {raw[:2]!r})")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{source}: truncated PGM header")
        try:
            fields.append(int(raw[start:pos]))
        except ValueError:
            raise FormatError(f"{source}: bad PGM header field {raw[start:pos]!r}") from None
    pos += 1  # single whitespace byte before the raster
    w, h, maxval = fields
    if not 0 < maxval < 256:
        raise FormatError(f"{source}: only 8-bit PGM is supported (maxval {maxval})")
    payload = raw[pos:pos + w * h]
    if len(payload) != w * h:
        raise FormatError(f"{source}: truncated PGM payload ({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return decode_pgm(raw, str(path))


def load_image(path) -> T.Tensor:
    """8-bit grayscale PGM as a [1,H,W] tensor scaled to [0,1]."""
    return T.Tensor(read_pgm(path)[None].astype(np.float32) / 255.0)


def to_uint8(image) -> np.ndarray:
    """[0,1] image (any leading channel axis) to clamped 8-bit pixels."""
    arr = np.asarray(image.data if isinstance(image, T.Tensor) else image, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[0]
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 12
    max_size: int = 28
    background: float = 0.12
    object_reflectivity: tuple = (0.55, 0.9)
    looks: float = 4.0
    num_classes: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.looks < 1:
            raise DataError(f"speckle looks must be >= 1, got {self.looks}")
        if self.max_size >= self.image_size:
            raise DataError("objects must fit inside the image")


def speckle(reflectivity: np.ndarray, looks: float, rng: np.random.Generator) -> np.ndarray:
    """Multiplicative Gamma(L, 1/L) speckle: unit-mean fluctuation with variance 1/L."""
    if np.isinf(looks):
        return np.array(reflectivity, dtype=np.float64)
    return reflectivity * rng.gamma(looks, 1.0 / looks, size=np.shape(reflectivity))


def _shape_mask(cls: int, rng: np.random.Generator, lo: int, hi: int) -> np.ndarray:
    """Binary mask of one object; each class draws from its own shape family."""
    s = int(rng.integers(lo, hi + 1))
    if cls == 0:  # aircraft: fuselage plus wings
        m = np.zeros((s, s), dtype=bool)
        t = max(2, s // 5)
        c = s // 2
        m[:, c - t // 2:c - t // 2 + t] = True
        w0 = s // 3
        m[w0:w0 + t, :] = True
        m[s - t:, s // 4:s - s // 4] = True
    elif cls == 1:  # ship: elongated ellipse
        L, W = s, max(4, s // 3)
        yy, xx = np.mgrid[:W, :L]
        m = ((xx - (L - 1) / 2) / (L / 2)) ** 2 + ((yy - (W - 1) / 2) / (W / 2)) ** 2 <= 1.0
        if rng.random() < 0.5:
            m = m.T
    elif cls == 2:  # car: small compact rectangle
        h = int(rng.integers(max(4, lo // 2), max(5, lo * 3 // 4) + 1))
        w = int(rng.integers(h, h + max(2, h // 2) + 1))
        m = np.ones((h, w), dtype=bool)
        if rng.random() < 0.5:
            m = m.T
    elif cls == 3:  # bridge: long thin bar
        L = max(s, (lo + hi) // 2)
        t = max(3, L // 8)
        m = np.ones((t, L), dtype=bool)
        if rng.random() < 0.5:
            m = m.T
    elif cls == 4:  # tank: disk
        yy, xx = np.mgrid[:s, :s]
        r = (s - 1) / 2
        m = (yy - r) ** 2 + (xx - r) ** 2 <= (s / 2) ** 2
    else:  # harbor: open rectangle (U shape)
        m = np.zeros((s, s), dtype=bool)
        t = max(2, s // 6)
        m[:, :t] = True
        m[:, s - t:] = True
        m[s - t:, :] = True
    ys, xs = np.nonzero(m)
    return m[ys.min():ys.max() + 1, xs.min():xs.max() + 1]


def generate_scene(spec: SceneSpec, index: int):
    """Render scene ``index``: returns (uint8 image [H,W], list of (class, x, y, w, h)).

    Pure function of ``(spec, index)``.
    """
    rng = np.random.default_rng([spec.seed, index])
    S = spec.image_size
    refl = np.full((S, S), spec.background)
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    occupied = np.zeros((S, S), dtype=bool)
    objects = []
    for _ in range(n):
        cls = int(rng.integers(spec.num_classes))
        mask = _shape_mask(cls, rng, spec.min_size, spec.max_size)
        h, w = mask.shape
        level = rng.uniform(*spec.object_reflectivity)
        for _attempt in range(50):
            y = int(rng.integers(0, S - h + 1))
            x = int(rng.integers(0, S - w + 1))
            y0, x0 = max(0, y - 2), max(0, x - 2)
            if not occupied[y0:y + h + 2, x0:x + w + 2].any():
                break
        else:
            continue
        occupied[y:y + h, x:x + w] = True
        refl[y:y + h, x:x + w][mask] = level
        objects.append((cls, x, y, w, h))
    intensity = speckle(refl, spec.looks, rng)
    return to_uint8(intensity), objects


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image_id: int
    path: Path
    width: int
    height: int
    boxes: np.ndarray  # [n,4] x1,y1,x2,y2
    labels: np.ndarray  # [n]

    def load(self) -> T.Tensor:
        return load_image(self.path)


@dataclass
class Dataset:
    root: Path
    split: str
    samples: list
    categories: list

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def class_counts(self) -> list:
        counts = [0] * len(self.categories)
        for s in self.samples:
            for label in s.labels:
                counts[int(label)] += 1
        return counts


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_dataset(root, split: str, spec: SceneSpec, count: int, start_index: int = 0,
                  with_labels: bool = True) -> Path:
    """Generate ``count`` scenes and write images, annotations and the class ledger."""
    split_dir = Path(root) / split
    (split_dir / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    counts = [0] * spec.num_classes
    ann_id = 0
    for k in range(count):
        image_id = k
        pixels, objects = generate_scene(spec, start_index + k)
        name = f"images/{image_id:06d}.pgm"
        write_pgm(split_dir / name, pixels)
        images.append({"id": image_id, "file_name": name, "width": spec.image_size,
                       "height": spec.image_size})
        if not with_labels:
            continue
        for cls, x, y, w, h in objects:
            annotations.append({"id": ann_id, "image_id": image_id, "category_id": cls,
                                "bbox": [x, y, w, h]})
            counts[cls] += 1
            ann_id += 1
    categories = [{"id": i, "name": CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"class{i}"}
                  for i in range(spec.num_classes)]
    _atomic_write(split_dir / "annotations.json",
                  _dump_json({"images": images, "annotations": annotations, "categories": categories}))
    ledger = {"spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
              "start_index": start_index, "count": count, "class_counts": counts}
    _atomic_write(split_dir / "ledger.json", _dump_json(ledger))
    return split_dir


def _field(record: dict, key: str, kind: str, index: int, path: Path):
    if key not in record:
        raise FormatError(f"{path}: {kind} record {index} is missing '{key}'")
    return record[key]


def read_dataset(root, split: str) -> Dataset:
    """Load and validate a split; raises FormatError / IntegrityError with path and record."""
    split_dir = Path(root) / split
    path = split_dir / "annotations.json"
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must be an object")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise FormatError(f"{path}: missing list '{key}'")
    categories = []
    for i, c in enumerate(doc["categories"]):
        categories.append({"id": int(_field(c, "id", "category", i, path)),
                           "name": str(_field(c, "name", "category", i, path))})
    cat_ids = {c["id"] for c in categories}
    if len(cat_ids) != len(categories):
        raise IntegrityError(f"{path}: duplicate category ids")
    # contiguous training labels in ascending category-id order
    categories.sort(key=lambda c: c["id"])
    label_of = {c["id"]: i for i, c in enumerate(categories)}
    images = {}
    for i, rec in enumerate(doc["images"]):
        image_id = _field(rec, "id", "image", i, path)
        if image_id in images:
            raise IntegrityError(f"{path}: duplicate image id {image_id}")
        images[image_id] = (str(_field(rec, "file_name", "image", i, path)),
                            int(_field(rec, "width", "image", i, path)),
                            int(_field(rec, "height", "image", i, path)))
    per_image: dict = {k: ([], []) for k in images}
    seen_ann = set()
    for i, rec in enumerate(doc["annotations"]):
        ann_id = _field(rec, "id", "annotation", i, path)
        if ann_id in seen_ann:
            raise IntegrityError(f"{path}: duplicate annotation id {ann_id}")
        seen_ann.add(ann_id)
        image_id = _field(rec, "image_id", "annotation", i, path)
        if image_id not in images:
            raise IntegrityError(f"{path}: annotation {ann_id} references missing image id {image_id}")
        cat = _field(rec, "category_id", "annotation", i, path)
        if cat not in cat_ids:
            raise IntegrityError(f"{path}: annotation {ann_id} references missing category {cat}")
        bbox = _field(rec, "bbox", "annotation", i, path)
        try:
            x, y, w, h = (float(v) for v in bbox)
        except (TypeError, ValueError):
            raise FormatError(f"{path}: annotation record {i} has a malformed bbox {bbox!r}") from None
        _, W, H = images[image_id]
        if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > W or y + h > H:
            raise IntegrityError(f"{path}: annotation {ann_id} box {bbox} lies outside image {image_id}")
        per_image[image_id][0].append([x, y, x + w, y + h])
        per_image[image_id][1].append(label_of[cat])
    samples = []
    for image_id, (name, W, H) in images.items():
        bxs, lbs = per_image[image_id]
        samples.append(Sample(image_id, split_dir / name, W, H,
                              np.asarray(bxs, dtype=np.float64).reshape(-1, 4),
                              np.asarray(lbs, dtype=np.int64)))
    return Dataset(split_dir, split, samples, categories)


def read_ledger(root, split: str) -> Optional[dict]:
    path = Path(root) / split / "ledger.json"
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def iter_images(paths: Iterable) -> Iterable:
    for p in paths:
        yield Path(p), load_image(p)


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------

def class_gray(label: int, num_classes: int) -> int:
    """Distinct gray level per class, from 255 down to 55."""
    if num_classes <= 1:
        return 255
    return int(round(255 - 200 * label / (num_classes - 1)))


def box_pixels(box, width: int, height: int) -> tuple:
    """Inclusive pixel rectangle (c0, r0, c1, r1) covered by box [x1, x2) x [y1, y2), clipped."""
    x1, y1, x2, y2 = (int(np.floor(v + 0.5)) for v in box)
    return (min(max(x1, 0), width - 1), min(max(y1, 0), height - 1),
            min(max(x2 - 1, 0), width - 1), min(max(y2 - 1, 0), height - 1))


def draw_boxes(pixels: np.ndarray, boxes, labels, num_classes: int) -> np.ndarray:
    """Copy of an 8-bit [H,W] image with one-pixel box outlines burned in."""
    out = np.array(pixels, dtype=np.uint8, copy=True)
    H, W = out.shape
    for box, label in zip(np.asarray(boxes).reshape(-1, 4), labels):
        c0, r0, c1, r1 = box_pixels(box, W, H)
        g = class_gray(int(label), num_classes)
        out[r0, c0:c1 + 1] = g
        out[r1, c0:c1 + 1] = g
        out[r0:r1 + 1, c0] = g
        out[r0:r1 + 1, c1] = g
    return out
