"""Netpbm codecs and the on-disk dataset layout.

Layout::

    <root>/meta.json          class lists, format_version, train/val split
    <root>/annotations.json   [{id, width, height, objects: [{class, bbox}]}]
    <root>/images/<id>.ppm    8-bit binary RGB
    <root>/heatmaps/<id>_<aff>.pgm   16-bit binary gray, 0..65535 <-> 0..1
"""

from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path

import numpy as np

from ..core import Box, Sample

FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)


class DatasetError(ValueError):
    """Malformed or inconsistent dataset on disk."""


_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array (or float in [0, 1]) as binary P6."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM needs H x W x 3, got {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


def write_pgm16(path, values: np.ndarray) -> None:
    """Write an H x W array in [0, 1] as a 16-bit (big-endian) binary P5."""
    arr = np.asarray(values)
    if arr.dtype != np.uint16:
        arr = np.rint(np.clip(arr, 0.0, 1.0) * 65535.0).astype(np.uint16)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n65535\n" % (w, h))
        fh.write(arr.astype(">u2").tobytes())


def read_netpbm(path) -> np.ndarray:
    """Read binary P5/P6 files; returns the raw integer array."""
    data = Path(path).read_bytes()
    m = _HEADER.match(data)
    if not m:
        raise DatasetError(f"{path}: not a binary PPM/PGM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    count = w * h * channels
    body = data[m.end():]
    if len(body) < count * dtype.itemsize:
        raise DatasetError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=dtype, count=count)
    arr = arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8)


def read_ppm(path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim != 3:
        raise DatasetError(f"{path}: expected a color PPM")
    return arr.astype(np.float32) / 255.0


def read_pgm(path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected a grayscale PGM")
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    return arr.astype(np.float32) / np.float32(scale)


def split_ids(ids, train_fraction: float = 0.8) -> dict[str, list[str]]:
    """Deterministic split: ids ranked by SHA-256, the first 80% train."""
    ranked = sorted(ids, key=lambda s: (hashlib.sha256(s.encode()).hexdigest(), s))
    n_train = int(len(ranked) * train_fraction)
    return {"train": sorted(ranked[:n_train]), "val": sorted(ranked[n_train:])}


def _dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def save_dataset(samples, root, object_classes, affordance_classes) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "heatmaps").mkdir(parents=True, exist_ok=True)
    samples = sorted(samples, key=lambda s: s.id)
    annotations = []
    for s in samples:
        write_ppm(root / "images" / f"{s.id}.ppm", s.image)
        for a, name in enumerate(affordance_classes):
            write_pgm16(root / "heatmaps" / f"{s.id}_{name}.pgm", s.affordance[..., a])
        annotations.append(
            {
                "id": s.id,
                "width": s.width,
                "height": s.height,
                "objects": [
                    {"class": object_classes[c], "bbox": [float(v) for v in b]}
                    for c, b in zip(s.classes, s.boxes)
                ],
            }
        )
    meta = {
        "format_version": FORMAT_VERSION,
        "object_classes": list(object_classes),
        "affordance_classes": list(affordance_classes),
        "splits": split_ids([s.id for s in samples]),
    }
    _dump_json(root / "annotations.json", annotations)
    _dump_json(root / "meta.json", meta)
    return root


def _load_json(path):
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed JSON ({exc})") from None


def load_meta(root) -> dict:
    meta = _load_json(Path(root) / "meta.json")
    version = meta.get("format_version")
    if version not in SUPPORTED_VERSIONS:
        raise DatasetError(f"unsupported format_version {version!r}")
    for key in ("object_classes", "affordance_classes"):
        if not isinstance(meta.get(key), list):
            raise DatasetError(f"meta.json: missing list {key!r}")
    return meta


def load_dataset(root, split: str | None = None) -> tuple[list[Sample], dict]:
    """Load samples (sorted by id) and the meta dict.

    ``split`` selects ``"train"`` or ``"val"`` ids from meta.json.
    """
    root = Path(root)
    meta = load_meta(root)
    ann_path = root / "annotations.json"
    annotations = _load_json(ann_path) if ann_path.exists() else []
    if not isinstance(annotations, list):
        raise DatasetError("annotations.json: expected a list of images")
    classes = meta["object_classes"]
    affs = meta["affordance_classes"]
    wanted = None
    if split is not None:
        splits = meta.get("splits") or split_ids([a["id"] for a in annotations])
        if split not in splits:
            raise DatasetError(f"unknown split {split!r}")
        wanted = set(splits[split])
    samples = []
    for entry in annotations:
        try:
            sid, width, height = str(entry["id"]), int(entry["width"]), int(entry["height"])
            objects = entry["objects"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"annotations.json: malformed entry {entry!r} ({exc})") from None
        if wanted is not None and sid not in wanted:
            continue
        img_path = root / "images" / f"{sid}.ppm"
        if not img_path.exists():
            raise DatasetError(f"image {sid}: missing file {img_path}")
        image = read_ppm(img_path)
        if image.shape[:2] != (height, width):
            raise DatasetError(f"image {sid}: size {image.shape[1]}x{image.shape[0]} != annotated {width}x{height}")
        cls_ids, boxes = [], []
        for obj in objects:
            name = obj.get("class")
            if name not in classes:
                raise DatasetError(f"image {sid}: unknown class {name!r}")
            bbox = obj.get("bbox")
            if not (isinstance(bbox, list) and len(bbox) == 4):
                raise DatasetError(f"image {sid}: bbox must be [x1, y1, x2, y2], got {bbox!r}")
            box = Box(*map(float, bbox))
            if not (box.is_valid() and box.x1 >= 0 and box.y1 >= 0 and box.x2 <= width and box.y2 <= height):
                raise DatasetError(f"image {sid}: bbox {bbox} is inverted or out of bounds")
            cls_ids.append(classes.index(name))
            boxes.append(box)
        heat = np.zeros((height, width, len(affs)), dtype=np.float32)
        for a, name in enumerate(affs):
            hp = root / "heatmaps" / f"{sid}_{name}.pgm"
            if not hp.exists():
                raise DatasetError(f"image {sid}: missing heatmap {hp}")
            heat[..., a] = read_pgm(hp)
        samples.append(Sample(id=sid, image=image, classes=cls_ids, boxes=boxes, affordance=heat))
    samples.sort(key=lambda s: s.id)
    return samples, meta


def tree_checksum(root) -> str:
    """SHA-256 over every file path and content below ``root``."""
    digest = hashlib.sha256()
    root = Path(root)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            digest.update(str(p.relative_to(root)).encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()
