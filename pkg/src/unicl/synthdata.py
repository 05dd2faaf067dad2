"""Deterministic synthetic scenes with per-class masks and region captions.

Objects are drawn on the patch grid (one grid cell = one ``P x P`` patch), so
every image patch is either flat background, flat object colour, or a small
"dot" object in the cell corner. A codebook of ``1 + 2*len(COLORS) + 3``
entries therefore represents images and masks exactly.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .quantizers import BBox

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 210, 40),
    "cyan": (40, 210, 210),
    "magenta": (210, 50, 200),
}
BACKGROUND = (30, 30, 30)
SHAPES = ("square", "bar", "frame")

# cell footprints per shape; None marks the sub-patch dot
_VARIANTS: dict[str, list] = {
    "square": [None, (1, 1), (2, 2), (3, 3)],
    "bar": [(2, 1), (4, 2), (6, 2)],
    "frame": [(3, 3), (4, 4)],
}
DOT_PIXELS = 3
MAX_OBJECTS = 4
_PLACEMENT_TRIES = 64

VERTICAL = ("top", "middle", "bottom")
HORIZONTAL = ("left", "center", "right")


def default_class_table() -> tuple[str, ...]:
    return tuple(f"{c} {s}" for s in SHAPES for c in COLORS)


def caption_alphabet() -> str:
    words = ["a", "in", "the", *COLORS, *SHAPES, *VERTICAL, *HORIZONTAL]
    return "".join(sorted(set(" ".join(words))))


@dataclass
class SceneObject:
    class_index: int
    bbox: BBox
    mask: np.ndarray  # (H, W) bool


@dataclass
class SceneRecord:
    image: np.ndarray  # (H, W, 3) uint8
    objects: list[SceneObject]
    captions: list[tuple[int, BBox, str]]

    def class_mask(self, class_index: int) -> np.ndarray:
        m = np.zeros(self.image.shape[:2], dtype=bool)
        for obj in self.objects:
            if obj.class_index == class_index:
                m |= obj.mask
        return m


def mask_image(mask: np.ndarray) -> np.ndarray:
    """Binary mask as a black/white RGB image."""
    return np.repeat(np.where(mask, 255, 0).astype(np.uint8)[:, :, None], 3, axis=2)


def location_phrase(b: BBox) -> str:
    cx = (b.x1 + b.x2) / 2
    cy = (b.y1 + b.y2) / 2
    v = VERTICAL[min(int(cy * 3), 2)]
    h = HORIZONTAL[min(int(cx * 3), 2)]
    return f"{v} {h}"


def make_caption(class_name: str, b: BBox) -> str:
    return f"a {class_name} in the {location_phrase(b)}"


def _footprint(variant, shape: str) -> np.ndarray:
    if variant is None:
        return np.ones((1, 1), dtype=bool)
    w, h = variant
    cells = np.ones((h, w), dtype=bool)
    if shape == "frame":
        cells[1:-1, 1:-1] = False
    return cells


def generate_scene(rng: np.random.Generator, class_names, size=(32, 32), patch_size: int = 4) -> SceneRecord:
    h, w = size
    if h % patch_size or w % patch_size:
        raise ValueError(f"scene size {size} must be a multiple of patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    parsed = [name.split(" ") for name in class_names]

    image = np.empty((h, w, 3), dtype=np.uint8)
    image[:] = BACKGROUND
    occupied = np.zeros((gh, gw), dtype=bool)
    objects: list[SceneObject] = []
    used_colors: set[str] = set()

    n = int(rng.integers(1, MAX_OBJECTS + 1))
    for _ in range(n):
        allowed = [i for i, (c, _s) in enumerate(parsed) if c not in used_colors]
        if not allowed:
            break
        cls = allowed[int(rng.integers(len(allowed)))]
        color, shape = parsed[cls]
        variants = _VARIANTS[shape]
        variant = variants[int(rng.integers(len(variants)))]
        cells = _footprint(variant, shape)
        fh, fw = cells.shape
        if fh > gh or fw > gw:
            continue
        placed = False
        for _try in range(_PLACEMENT_TRIES):
            r = int(rng.integers(gh - fh + 1))
            c = int(rng.integers(gw - fw + 1))
            box_cells = occupied[r : r + fh, c : c + fw]
            if box_cells.any():
                continue
            placed = True
            break
        if not placed:
            continue
        # reserve the whole bounding rectangle so no object nests inside a frame
        occupied[r : r + fh, c : c + fw] = True
        mask = np.zeros((h, w), dtype=bool)
        if variant is None:
            y0, x0 = r * patch_size, c * patch_size
            mask[y0 : y0 + DOT_PIXELS, x0 : x0 + DOT_PIXELS] = True
        else:
            up = np.kron(cells, np.ones((patch_size, patch_size), dtype=bool))
            mask[r * patch_size : (r + fh) * patch_size, c * patch_size : (c + fw) * patch_size] = up
        image[mask] = COLORS[color]
        ys, xs = np.nonzero(mask)
        bbox = BBox(xs.min() / w, ys.min() / h, (xs.max() + 1) / w, (ys.max() + 1) / h)
        objects.append(SceneObject(cls, bbox, mask))
        used_colors.add(color)

    captions = [(o.class_index, o.bbox, make_caption(class_names[o.class_index], o.bbox)) for o in objects]
    return SceneRecord(image, objects, captions)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


# ---------------------------------------------------------------------------
# datasets and pools


@dataclass
class Dataset:
    seed: int
    size: tuple[int, int]
    patch_size: int
    class_names: tuple[str, ...]
    num_train: int
    num_val: int
    scenes: list[SceneRecord] = field(repr=False)

    @property
    def train_ids(self) -> range:
        return range(self.num_train)

    @property
    def val_ids(self) -> range:
        return range(self.num_train, self.num_train + self.num_val)

    def split(self, name: str) -> range:
        return {"train": self.train_ids, "val": self.val_ids}[name]

    def caption_corpus(self) -> list[str]:
        out = list(self.class_names)
        for sid in self.train_ids:
            out.extend(c for _, _, c in self.scenes[sid].captions)
        return out


def build_dataset(seed: int, num_train: int, num_val: int, size=(32, 32), patch_size: int = 4, class_names=None) -> Dataset:
    names = tuple(class_names) if class_names is not None else default_class_table()
    scenes = [generate_scene(scene_rng(seed, i), names, size, patch_size) for i in range(num_train + num_val)]
    return Dataset(seed, tuple(size), patch_size, names, num_train, num_val, scenes)


ObjectRef = tuple[int, int]  # (scene id, object index)


class PoolError(LookupError):
    pass


def build_pools(scenes, scene_ids=None) -> dict[int, list[ObjectRef]]:
    """Per-class lists of ``(scene id, object index)`` references."""
    ids = range(len(scenes)) if scene_ids is None else scene_ids
    pools: dict[int, list[ObjectRef]] = {}
    for sid in ids:
        for j, obj in enumerate(scenes[sid].objects):
            pools.setdefault(obj.class_index, []).append((sid, j))
    return dict(sorted(pools.items()))


def sample_in_context(pool, class_index: int, k: int, rng: np.random.Generator, exclude: int | None = None) -> list[ObjectRef]:
    """``k`` distinct references of one class, uniform without replacement."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    cands = [ref for ref in pool.get(class_index, ()) if ref[0] != exclude]
    if len(cands) < k:
        raise PoolError(f"class {class_index}: pool has {len(cands)} usable entries, needs {k} (deficit {k - len(cands)})")
    picks = rng.choice(len(cands), size=k, replace=False)
    return [cands[int(i)] for i in picks]


# ---------------------------------------------------------------------------
# on-disk layout
#
# <dir>/manifest.txt       header, seed, size, patch, split sizes, class table
# <dir>/scenes/NNNNNN.rgb  H*W*3 raw uint8, row-major
# <dir>/scenes/NNNNNN.msk  n_objects*H*W raw uint8 in {0, 1}
# <dir>/scenes/NNNNNN.txt  one line per object: class x1 y1 x2 y2 <TAB> caption

_DATASET_HEADER = "unicl-dataset 1"


def manifest_text(ds: Dataset) -> str:
    lines = [
        _DATASET_HEADER,
        f"seed {ds.seed}",
        f"size {ds.size[0]} {ds.size[1]}",
        f"patch {ds.patch_size}",
        f"train {ds.num_train}",
        f"val {ds.num_val}",
    ]
    lines.extend(f"class {i} {name}" for i, name in enumerate(ds.class_names))
    return "\n".join(lines) + "\n"


def _parse_manifest(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0] != _DATASET_HEADER:
        raise ValueError("not a dataset manifest")
    out: dict = {"classes": []}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "class":
            _idx, _, name = rest.partition(" ")
            out["classes"].append(name)
        elif key == "size":
            out["size"] = tuple(int(t) for t in rest.split())
        else:
            out[key] = int(rest)
    return out


def save_dataset(ds: Dataset, directory) -> None:
    d = Path(directory)
    (d / "scenes").mkdir(parents=True, exist_ok=True)
    (d / "manifest.txt").write_text(manifest_text(ds))
    for sid, scene in enumerate(ds.scenes):
        stem = d / "scenes" / f"{sid:06d}"
        Path(f"{stem}.rgb").write_bytes(np.ascontiguousarray(scene.image).tobytes())
        masks = np.stack([o.mask for o in scene.objects]).astype(np.uint8) if scene.objects else np.zeros(0, np.uint8)
        Path(f"{stem}.msk").write_bytes(masks.tobytes())
        rows = [
            f"{o.class_index} {o.bbox.x1!r} {o.bbox.y1!r} {o.bbox.x2!r} {o.bbox.y2!r}\t{cap}"
            for o, (_, _, cap) in zip(scene.objects, scene.captions)
        ]
        Path(f"{stem}.txt").write_text("".join(r + "\n" for r in rows))


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    meta = _parse_manifest((d / "manifest.txt").read_text())
    h, w = meta["size"]
    scenes = []
    for sid in range(meta["train"] + meta["val"]):
        stem = d / "scenes" / f"{sid:06d}"
        image = np.frombuffer(Path(f"{stem}.rgb").read_bytes(), dtype=np.uint8).reshape(h, w, 3).copy()
        rows = [line.split("\t") for line in Path(f"{stem}.txt").read_text().splitlines()]
        raw = np.frombuffer(Path(f"{stem}.msk").read_bytes(), dtype=np.uint8)
        masks = raw.reshape(len(rows), h, w).astype(bool) if rows else []
        objects, captions = [], []
        for (head, cap), mask in zip(rows, masks):
            cls, *coords = head.split(" ")
            b = BBox(*(float(c) for c in coords))
            objects.append(SceneObject(int(cls), b, mask))
            captions.append((int(cls), b, cap))
        scenes.append(SceneRecord(image, objects, captions))
    return Dataset(meta["seed"], (h, w), meta["patch"], tuple(meta["classes"]), meta["train"], meta["val"], scenes)


def regenerate_from_manifest(directory) -> Dataset:
    meta = _parse_manifest((Path(directory) / "manifest.txt").read_text())
    return build_dataset(meta["seed"], meta["train"], meta["val"], meta["size"], meta["patch"], meta["classes"])


def directory_digest(directory) -> str:
    hasher = hashlib.sha256()
    root = Path(directory)
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            p = Path(dirpath) / name
            hasher.update(str(p.relative_to(root)).encode())
            hasher.update(p.read_bytes())
    return hasher.hexdigest()
