"""Synthetic face-like images with known boxes, landmarks and attributes.

Each face is a bright ellipse on a noisy background. Attributes are drawn
as independent coin flips and rendered as visible marks (a bright mouth, a
dark band over the eyes, and so on), so they are learnable from pixels.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (ATTRIBUTE, FACE, LANDMARK, NONFACE, Box, CropError, Record, format_record,
                   generate_nonface_crops, write_image)

ATTRIBUTE_NAMES = ("smiling", "eyeglasses", "bangs", "pale_skin",
                   "beard", "hat", "bright_background", "big_eyes")
DEFAULT_MIXTURE = {NONFACE: 0.25, FACE: 0.125, LANDMARK: 0.125, ATTRIBUTE: 0.5}


@dataclass
class Face:
    image: np.ndarray  # (C, S, S)
    box: Box
    landmarks: np.ndarray  # pixels, (2k,)
    attributes: np.ndarray  # 0/1, (d,)


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _rect(yy, xx, top, left, bottom, right):
    return (yy >= top) & (yy < bottom) & (xx >= left) & (xx < right)


def _background(rng, side, bright):
    base = 0.7 if bright else 0.15
    img = base + 0.05 * rng.standard_normal((side, side))
    yy, xx = np.mgrid[0:side, 0:side]
    for _ in range(3):
        t, l = rng.integers(0, side, size=2)
        h, w = rng.integers(side // 10 + 1, side // 4 + 2, size=2)
        img[_rect(yy, xx, t, l, t + h, l + w)] += rng.uniform(-0.1, 0.1)
    return img


def render_face(rng: np.random.Generator, side: int, num_attributes: int = 4,
                num_landmarks: int = 5, channels: int = 1,
                face_fraction=(0.55, 0.8), canvas: np.ndarray | None = None) -> Face:
    if num_attributes > len(ATTRIBUTE_NAMES):
        raise ValueError(f"at most {len(ATTRIBUTE_NAMES)} synthetic attributes")
    attrs = rng.integers(0, 2, size=len(ATTRIBUTE_NAMES))
    attrs[num_attributes:] = 0
    on = dict(zip(ATTRIBUTE_NAMES, attrs.astype(bool)))

    img = _background(rng, side, on["bright_background"]) if canvas is None else canvas.copy()
    fh = rng.uniform(*face_fraction) * side
    fw = 0.8 * fh
    top = rng.uniform(0.12 * fh if on["hat"] else 0.0, side - fh)
    left = rng.uniform(0.0, side - fw)
    cy, cx = top + fh / 2, left + fw / 2
    yy, xx = np.mgrid[0:side, 0:side] + 0.5

    face = _ellipse(yy, xx, cy, cx, fh / 2, fw / 2)
    img[face] = 0.9 if on["pale_skin"] else 0.55
    if on["hat"]:
        img[_rect(yy, xx, top - 0.12 * fh, left, top + 0.1 * fh, left + fw)] = 0.02
    if on["bangs"]:
        img[face & (yy < top + 0.28 * fh)] = 0.1
    if on["beard"]:
        img[face & (yy > cy + 0.33 * fh)] = 0.2

    eye_y = cy - 0.12 * fh
    eyes = [(eye_y, cx - 0.22 * fw), (eye_y, cx + 0.22 * fw)]
    eye_r = (0.1 if on["big_eyes"] else 0.05) * fw
    for ey, ex in eyes:
        img[_ellipse(yy, xx, ey, ex, eye_r, eye_r)] = 0.0
    if on["eyeglasses"]:
        img[face & (np.abs(yy - eye_y) < 0.07 * fh)] = 0.0

    nose = (cy + 0.05 * fh, cx)
    mouth_y = cy + 0.25 * fh
    mouth = [(mouth_y, cx - 0.18 * fw), (mouth_y, cx + 0.18 * fw)]
    if on["smiling"]:
        img[_ellipse(yy, xx, mouth_y, cx, 0.07 * fh, 0.2 * fw)] = 1.0
    else:
        img[_rect(yy, xx, mouth_y - 0.02 * fh, cx - 0.12 * fw,
                  mouth_y + 0.02 * fh, cx + 0.12 * fw)] = 0.3

    points = [eyes[0], eyes[1], nose, mouth[0], mouth[1]]
    for i in range(5, num_landmarks):
        ang = 2 * np.pi * (i - 5) / max(num_landmarks - 5, 1)
        points.append((cy + 0.5 * fh * np.sin(ang), cx + 0.5 * fw * np.cos(ang)))
    lm = np.array([[x, y] for y, x in points[:num_landmarks]]).reshape(-1)

    img = np.clip(img, 0.0, 1.0)
    image = np.repeat(img[None], channels, axis=0)
    box = Box(left, top, fh, fw)
    return Face(image, box, lm, attrs[:num_attributes].astype(np.int64))


def _kind_counts(n: int, mixture: dict[str, float]) -> dict[str, int]:
    counts = {k: int(np.floor(mixture.get(k, 0.0) * n)) for k in (NONFACE, FACE, LANDMARK)}
    counts[ATTRIBUTE] = n - sum(counts.values())
    return counts


def _nonface_patch(rng, side, num_attributes, num_landmarks, channels):
    for _ in range(100):
        scene = render_face(rng, 3 * side, num_attributes, num_landmarks, channels,
                            face_fraction=(0.25, 0.4))
        try:
            return generate_nonface_crops(scene.image, scene.box, 1,
                                          int(rng.integers(2**31)), out_side=side)[0]
        except CropError:
            continue
    raise CropError("could not cut a non-face patch from 100 synthetic scenes")


def generate_synthetic(out_dir: str | Path, n: int, seed: int = 0, side: int = 64,
                       num_attributes: int = 4, num_landmarks: int = 5, channels: int = 1,
                       mixture: dict[str, float] | None = None) -> Path:
    """Write ``n`` images plus ``manifest.txt`` into ``out_dir``; return the manifest path.

    Non-face images are cut from larger scenes that contain a face, using
    :func:`generate_nonface_crops`.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    counts = _kind_counts(n, mixture or DEFAULT_MIXTURE)
    lines = [f"# synthetic faces: n={n} seed={seed} side={side} "
             f"attributes={','.join(ATTRIBUTE_NAMES[:num_attributes])} landmarks={num_landmarks}"]
    idx = 0
    for kind in (NONFACE, FACE, LANDMARK, ATTRIBUTE):
        for _ in range(counts[kind]):
            path = out / "images" / f"{idx:05d}_{kind}.png"
            if kind == NONFACE:
                crop = _nonface_patch(rng, side, num_attributes, num_landmarks, channels)
                write_image(path, crop.image)
                rec = Record(path, NONFACE)
            else:
                face = render_face(rng, side, num_attributes, num_landmarks, channels)
                write_image(path, face.image)
                if kind == FACE:
                    rec = Record(path, FACE, box=face.box)
                elif kind == LANDMARK:
                    rec = Record(path, LANDMARK, box=face.box, landmarks=face.landmarks)
                else:
                    rec = Record(path, ATTRIBUTE, box=face.box, landmarks=face.landmarks,
                                 attributes=face.attributes)
            lines.append(format_record(rec, out))
            idx += 1
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
