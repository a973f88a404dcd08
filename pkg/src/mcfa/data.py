"""Annotation records, manifests, non-face crops and batching.

Manifest lines look like ``<image-path> <kind> <payload...>``:

    nonface    (no payload)
    face       l t h w
    landmark   l t h w x1 y1 ... xk yk
    attribute  l t h w a1 ... ad [x1 y1 ... xk yk]

Boxes and landmarks are in source-image pixels; attribute labels are -1/1.
``#`` starts a comment. Relative paths resolve against the manifest's
directory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

NONFACE, FACE, LANDMARK, ATTRIBUTE = "nonface", "face", "landmark", "attribute"
KINDS = (NONFACE, FACE, LANDMARK, ATTRIBUTE)


class ManifestError(ValueError):
    pass


class CropError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    left: float
    top: float
    height: float
    width: float

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def area(self) -> float:
        return max(self.height, 0.0) * max(self.width, 0.0)

    def normalized(self, image_width: float, image_height: float) -> np.ndarray:
        return np.array([self.left / image_width, self.top / image_height,
                         self.height / image_height, self.width / image_width])


def compute_iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint or zero-area boxes."""
    area_a, area_b = a.area, b.area
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


@dataclass(frozen=True, eq=False)
class Sample:
    """One training or evaluation record at network resolution.

    ``box`` and ``landmarks`` are fractions of the image side; attributes
    are 0/1.
    """

    image: np.ndarray  # (C, S, S), values in [0, 1]
    kind: str
    box: np.ndarray | None = None
    landmarks: np.ndarray | None = None
    attributes: np.ndarray | None = None
    source: str = ""
    crop: Box | None = None  # where a non-face patch was cut from

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sample kind {self.kind!r}")
        if self.kind == NONFACE and any(v is not None for v in
                                        (self.box, self.landmarks, self.attributes)):
            raise ValueError("non-face samples carry no box, landmarks or attributes")
        if self.kind != NONFACE and self.box is None:
            raise ValueError(f"{self.kind} sample needs a box")
        if self.kind == LANDMARK and self.landmarks is None:
            raise ValueError("landmark sample needs landmarks")
        if self.kind == ATTRIBUTE and self.attributes is None:
            raise ValueError("attribute sample needs attributes")
        if self.image.ndim != 3 or self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image must be (C,H,W) with values in [0,1]")

    @property
    def is_face(self) -> bool:
        return self.kind != NONFACE


# --------------------------------------------------------------------------
# images


def resize_image(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of a (C,H,W) array to (C,side,side)."""
    if image.shape[1] == side and image.shape[2] == side:
        return image.astype(np.float64, copy=True)
    chans = [np.asarray(Image.fromarray(c.astype(np.float32), mode="F")
                        .resize((side, side), Image.BILINEAR), dtype=np.float64)
             for c in image]
    return np.clip(np.stack(chans), 0.0, 1.0)


def read_image(path: str | Path, channels: int = 1) -> np.ndarray:
    """Decode to (C,H,W) float64 in [0,1]."""
    with Image.open(path) as im:
        im = im.convert("L" if channels == 1 else "RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if channels == 1:
        return arr[None]
    if channels != 3:
        raise ValueError("channels must be 1 or 3")
    return arr.transpose(2, 0, 1).copy()


def write_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class Record:
    path: Path
    kind: str
    box: Box | None = None
    landmarks: np.ndarray | None = None  # pixels, (2k,)
    attributes: np.ndarray | None = None  # 0/1, (d,)
    line: int = 0


@dataclass
class DatasetManifest:
    records: list[Record] = field(default_factory=list)
    split: str = "train"
    num_attributes: int = 0
    num_landmarks: int = 5

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Record:
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    def kinds(self) -> set[str]:
        return {r.kind for r in self.records}

    def materialize(self, side: int, channels: int = 1) -> list[Sample]:
        return [load_sample(r, side, channels) for r in self.records]


def load_sample(record: Record, side: int, channels: int = 1) -> Sample:
    raw = read_image(record.path, channels)
    h, w = raw.shape[1:]
    image = resize_image(raw, side)
    box = record.box.normalized(w, h) if record.box is not None else None
    lm = None
    if record.landmarks is not None:
        lm = record.landmarks.astype(np.float64).copy()
        lm[0::2] /= w
        lm[1::2] /= h
    return Sample(image, record.kind, box, lm, record.attributes, source=str(record.path))


def _floats(tokens: list[str], where: str) -> list[float]:
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise ManifestError(f"{where}: {exc}") from None
    if not all(math.isfinite(v) for v in vals):
        raise ManifestError(f"{where}: non-finite number")
    return vals


def parse_manifest_line(text: str, num_attributes: int, num_landmarks: int = 5,
                        root: Path = Path("."), lineno: int = 0) -> Record | None:
    body = text.split("#", 1)[0].strip()
    if not body:
        return None
    tokens = body.split()
    where = f"line {lineno}"
    if len(tokens) < 2:
        raise ManifestError(f"{where}: expected '<image-path> <kind> ...'")
    path, kind, payload = tokens[0], tokens[1], tokens[2:]
    where = f"line {lineno} ({path})"
    if kind not in KINDS:
        raise ManifestError(f"{where}: unknown kind {kind!r}")
    vals = _floats(payload, where)
    k2 = 2 * num_landmarks
    full = Path(path) if Path(path).is_absolute() else root / path

    if kind == NONFACE:
        if vals:
            raise ManifestError(f"{where}: nonface records take no payload, got {len(vals)} values")
        return Record(full, kind, line=lineno)
    if len(vals) < 4:
        raise ManifestError(f"{where}: {kind} record needs a box 'l t h w'")
    box = Box(*vals[:4])
    if box.height <= 0 or box.width <= 0 or box.left < 0 or box.top < 0:
        raise ManifestError(f"{where}: invalid face box {vals[:4]}")
    rest = vals[4:]
    if kind == FACE:
        if rest:
            raise ManifestError(f"{where}: face records take exactly 4 values, got {len(vals)}")
        return Record(full, kind, box=box, line=lineno)
    if kind == LANDMARK:
        if len(rest) != k2:
            raise ManifestError(f"{where}: landmark record needs {k2} coordinates "
                                f"(k={num_landmarks}), got {len(rest)}")
        return Record(full, kind, box=box, landmarks=np.array(rest), line=lineno)
    # attribute
    d = num_attributes
    if len(rest) not in (d, d + k2):
        raise ManifestError(f"{where}: attribute record needs {d} labels "
                            f"(optionally followed by {k2} landmark coordinates), got {len(rest)}")
    labels = np.array(rest[:d])
    if not np.all(np.isin(labels, (-1.0, 1.0))):
        raise ManifestError(f"{where}: attribute labels must be -1 or 1")
    lm = np.array(rest[d:]) if len(rest) == d + k2 else None
    return Record(full, kind, box=box, landmarks=lm,
                  attributes=(labels > 0).astype(np.int64), line=lineno)


def load_manifest(path: str | Path, num_attributes: int, num_landmarks: int = 5,
                  split: str = "train", check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    records = []
    with open(path) as fh:
        for lineno, text in enumerate(fh, start=1):
            rec = parse_manifest_line(text, num_attributes, num_landmarks, root, lineno)
            if rec is None:
                continue
            if check_files and not rec.path.is_file():
                raise ManifestError(f"line {lineno}: image {rec.path} does not exist")
            records.append(rec)
    return DatasetManifest(records, split, num_attributes, num_landmarks)


def format_record(record: Record, root: Path | None = None) -> str:
    path = record.path
    if root is not None:
        try:
            path = record.path.relative_to(root)
        except ValueError:
            pass
    parts = [str(path), record.kind]
    if record.box is not None:
        b = record.box
        parts += [f"{v:g}" for v in (b.left, b.top, b.height, b.width)]
    if record.attributes is not None:
        parts += ["1" if a else "-1" for a in record.attributes]
    if record.landmarks is not None:
        parts += [f"{v:g}" for v in record.landmarks]
    return " ".join(parts)


# --------------------------------------------------------------------------
# non-face crops and batching


def generate_nonface_crops(image: np.ndarray, gt_face: Box, count: int, rng_seed: int,
                           out_side: int | None = None, size_range=(0.3, 0.8),
                           max_attempts: int = 1000) -> list[Sample]:
    """Square patches whose IoU with ``gt_face`` is below 0.001.

    Patch sides are drawn uniformly from ``size_range`` times the shorter
    image side; each patch is resized to ``out_side`` (default: unchanged).
    Gives up after ``max_attempts`` rejections for any single patch.
    """
    rng = np.random.default_rng(rng_seed)
    _, h, w = image.shape
    short = min(h, w)
    lo = max(1, int(math.ceil(size_range[0] * short)))
    hi = max(lo, int(math.floor(size_range[1] * short)))
    if lo >= short:
        raise CropError(f"image {h}x{w} too small for crops of side {lo}")
    crops = []
    for n in range(count):
        for _ in range(max_attempts):
            side = int(rng.integers(lo, hi + 1))
            x = int(rng.integers(0, w - side + 1))
            y = int(rng.integers(0, h - side + 1))
            box = Box(x, y, side, side)
            if compute_iou(box, gt_face) < 0.001:
                break
        else:
            raise CropError(f"no non-face crop found for patch {n + 1}/{count} after "
                            f"{max_attempts} attempts (face {gt_face} in {w}x{h} image)")
        patch = image[:, y:y + side, x:x + side]
        patch = resize_image(patch, out_side) if out_side else patch.copy()
        crops.append(Sample(patch, NONFACE, crop=box))
    return crops


def make_batches(items: Sequence, batch_size: int, rng_seed: int,
                 epoch: int = 0) -> Iterator[list]:
    """Shuffled mini-batches; the order depends only on (rng_seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.random.default_rng([rng_seed, epoch]).permutation(len(items))
    for start in range(0, len(order), batch_size):
        yield [items[i] for i in order[start:start + batch_size]]
