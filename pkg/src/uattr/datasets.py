"""Synthetic class-conditioned 8x8 pattern datasets with planted duplicate groups."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import Example
from .rng import keyed_integers, keyed_normal, keyed_uniform, tag

GLYPHS = ("bars", "cross", "disk", "checker")


@dataclass(frozen=True)
class PlantedGroup:
    group_id: int
    cls: int
    count: int
    jitter_std: float = 0.0


@dataclass(frozen=True)
class DatasetSpec:
    n: int = 2000
    num_classes: int = 4
    planted_groups: tuple[PlantedGroup, ...] = ()
    seed: int = 0
    image_shape: tuple[int, int, int] = (1, 8, 8)

    def __post_init__(self):
        groups = tuple(g if isinstance(g, PlantedGroup) else PlantedGroup(**g) for g in self.planted_groups)
        object.__setattr__(self, "planted_groups", groups)
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        if self.n < 0 or self.num_classes < 1:
            raise ValueError("n must be >= 0 and num_classes >= 1")
        if sum(g.count for g in groups) > self.n:
            raise ValueError("planted groups exceed the dataset size")
        if len({g.group_id for g in groups}) != len(groups):
            raise ValueError("duplicate planted group ids")
        per_class = np.bincount(np.arange(self.n) % self.num_classes, minlength=self.num_classes)
        need = np.zeros(self.num_classes, dtype=int)
        for g in groups:
            if g.jitter_std < 0:
                raise ValueError(f"group {g.group_id}: jitter_std must be >= 0")
            if not 0 <= g.cls < self.num_classes:
                raise ValueError(f"group {g.group_id}: class out of range")
            if g.count < 1:
                raise ValueError(f"group {g.group_id}: count must be >= 1")
            need[g.cls] += g.count
        if np.any(need > per_class):
            raise ValueError("planted groups exceed the members available in a class")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "num_classes": self.num_classes,
            "planted_groups": [vars(g) for g in self.planted_groups],
            "seed": self.seed,
            "image_shape": list(self.image_shape),
        }


@dataclass(frozen=True)
class Dataset:
    examples: tuple[Example, ...]
    spec: DatasetSpec
    group_of: dict = field(default_factory=dict)
    source: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def ids(self) -> np.ndarray:
        return np.array([e.id for e in self.examples], dtype=np.int64)

    @property
    def images(self) -> np.ndarray:
        if not self.examples:
            return np.zeros((0,) + tuple(self.spec.image_shape), dtype=np.float32)
        return np.stack([e.x for e in self.examples])

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.c for e in self.examples], dtype=np.int64)

    def by_id(self, i: int) -> Example:
        for e in self.examples:
            if e.id == i:
                return e
        raise KeyError(f"no example with id {i}")

    def group_members(self, group_id: int) -> list[int]:
        return sorted(i for i, g in self.group_of.items() if g == group_id)

    def digest(self) -> str:
        """SHA-256 over ids, labels, flags and image bytes."""
        h = hashlib.sha256()
        for e in self.examples:
            h.update(np.array([e.id, e.c, int(e.flipped)], dtype="<i8").tobytes())
            h.update(np.asarray(e.x, dtype="<f4").tobytes())
        return h.hexdigest()


def _glyph(kind: str, h: int, w: int, r: np.ndarray) -> np.ndarray:
    """Binary mask of one glyph; ``r`` holds uniforms that fix its placement."""
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "bars":
        row = int(r[0] * (h - 1))
        return (yy == row) | (yy == row + 1)
    if kind == "cross":
        cy, cx = 1 + int(r[0] * (h - 2)), 1 + int(r[1] * (w - 2))
        return ((yy == cy) & (abs(xx - cx) <= 1 + int(r[2] * 2))) | ((xx == cx) & (abs(yy - cy) <= 1 + int(r[2] * 2)))
    if kind == "disk":
        cy, cx = 1.5 + r[0] * (h - 3), 1.5 + r[1] * (w - 3)
        rad = 1.2 + r[2] * 1.3
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
    if kind == "checker":
        cell = 1 + int(r[2] * 2)
        y0, x0 = int(r[0] * (h // 2)), int(r[1] * (w // 2))
        box = (yy >= y0) & (yy < y0 + h // 2 + 1) & (xx >= x0) & (xx < x0 + w // 2 + 1)
        return box & (((yy // cell) + (xx // cell)) % 2 == 0)
    raise ValueError(kind)


def render_pattern(cls: int, key, image_shape=(1, 8, 8), texture: float = 0.15) -> np.ndarray:
    """Procedural pattern for class ``cls``; classes beyond the four base glyphs reuse them transposed."""
    ch, h, w = image_shape
    r = keyed_uniform(*key, size=6)
    kind = GLYPHS[cls % len(GLYPHS)]
    mask = _glyph(kind, h, w, r[:3])
    if (cls // len(GLYPHS)) % 2 == 1 and h == w:
        mask = mask.T
    bg = -1.0 + 0.3 * r[3]
    fg = 0.3 + 0.7 * r[4]
    img = np.where(mask, fg, bg) + texture * keyed_normal(*key, tag("texture"), size=h * w).reshape(h, w)
    return np.broadcast_to(np.clip(img, -1.0, 1.0), (ch, h, w)).astype(np.float32)


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic dataset: round-robin classes, planted groups on same-class ids."""
    n, K = spec.n, spec.num_classes
    classes = np.arange(n) % K
    images = [render_pattern(int(classes[i]), (spec.seed, tag("pattern"), i), spec.image_shape) for i in range(n)]
    group_of: dict[int, int] = {}
    for g in spec.planted_groups:
        free = np.array([i for i in range(n) if classes[i] == g.cls and i not in group_of], dtype=np.int64)
        order = np.argsort(keyed_uniform(spec.seed, tag("group-place"), g.group_id, free, size=1)[:, 0], kind="stable")
        members = np.sort(free[order[: g.count]])
        base = render_pattern(g.cls, (spec.seed, tag("group-base"), g.group_id), spec.image_shape)
        for i in members:
            x = base
            if g.jitter_std > 0:
                noise = keyed_normal(spec.seed, tag("jitter"), int(i), size=base.size).reshape(base.shape)
                x = np.clip(base + g.jitter_std * noise, -1.0, 1.0).astype(np.float32)
            images[i] = np.array(x, dtype=np.float32)
            group_of[int(i)] = g.group_id
    examples = tuple(Example(images[i], int(classes[i]), i) for i in range(n))
    return Dataset(examples, spec, group_of, ("synthetic",) * n)


def leave_out(ds: Dataset, removed) -> Dataset:
    """Drop the given ids; surviving ids keep their numbers."""
    removed = {int(i) for i in removed}
    unknown = removed - {e.id for e in ds.examples}
    if unknown:
        raise KeyError(f"unknown ids: {sorted(unknown)[:10]}")
    keep = [k for k, e in enumerate(ds.examples) if e.id not in removed]
    return Dataset(
        tuple(ds.examples[k] for k in keep),
        ds.spec,
        {i: g for i, g in ds.group_of.items() if i not in removed},
        tuple(ds.source[k] for k in keep) if ds.source else (),
    )


def flip(e: Example) -> Example:
    """Mirror along the width axis; toggles ``flipped``."""
    return Example(np.ascontiguousarray(e.x[..., ::-1]), e.c, e.id, not e.flipped)


def random_subset(ids, k: int, *key) -> list[int]:
    """k ids drawn uniformly without replacement, keyed by ``key``."""
    ids = np.asarray(sorted(int(i) for i in ids), dtype=np.int64)
    if not 0 <= k <= len(ids):
        raise ValueError("k out of range")
    u = keyed_uniform(*key, ids, size=1)[:, 0]
    return sorted(int(i) for i in ids[np.argsort(u, kind="stable")[:k]])


# -- external corpora and on-disk format ------------------------------------

def _read_pgm(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "I;16", "I"):
            raise ValueError(f"{path}: expected grayscale PGM, got mode {im.mode}")
        arr = np.asarray(im)
    return arr


def ingest_pgm(directory, labels_csv, image_shape=(1, 8, 8), num_classes: int | None = None) -> Dataset:
    """Load raw 8-bit PGMs listed in a ``filename,class`` CSV.

    Images are resized by nearest neighbour and mapped to [-1, 1].
    """
    directory = Path(directory)
    ch, h, w = image_shape
    rows = []
    with open(labels_csv, newline="") as f:
        for row in csv.reader(f):
            if not row or row[0].strip().lower() == "filename":
                continue
            rows.append((row[0].strip(), int(row[1])))
    examples, sources = [], []
    for i, (name, c) in enumerate(rows):
        arr = _read_pgm(directory / name).astype(np.float64)
        H, W = arr.shape[:2]
        ri = (np.arange(h) * H) // h
        ci = (np.arange(w) * W) // w
        small = arr[np.ix_(ri, ci)]
        maxval = 255.0 if arr.max() <= 255 else 65535.0
        x = (small / maxval * 2.0 - 1.0).astype(np.float32)
        examples.append(Example(np.broadcast_to(x, (ch, h, w)).copy(), c, i))
        sources.append(name)
    K = num_classes or (max((c for _, c in rows), default=-1) + 1)
    if any(not 0 <= c < K for _, c in rows):
        raise ValueError("class label out of range")
    spec = DatasetSpec(n=len(rows), num_classes=max(K, 1), image_shape=tuple(image_shape))
    return Dataset(tuple(examples), spec, {}, tuple(sources))


def save_dataset(ds: Dataset, directory) -> tuple[Path, Path]:
    """Write ``dataset.csv`` (id,class,group_id,flipped,source) and ``images.bin``."""
    from .container import write_container

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path, blob_path = directory / "dataset.csv", directory / "images.bin"
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["id", "class", "group_id", "flipped", "source"])
        for k, e in enumerate(ds.examples):
            g = ds.group_of.get(e.id)
            wr.writerow([e.id, e.c, "" if g is None else g, int(e.flipped), ds.source[k] if ds.source else ""])
    header = {"kind": "images", "count": len(ds), "image_shape": list(ds.spec.image_shape), "spec": ds.spec.to_dict()}
    write_container(blob_path, b"UATTRIMG", header, ds.images.reshape(-1))
    return csv_path, blob_path


def load_dataset(directory) -> Dataset:
    from .container import read_container

    directory = Path(directory)
    header, payload = read_container(directory / "images.bin", b"UATTRIMG")
    shape = tuple(header["image_shape"])
    images = payload.reshape((header["count"],) + shape)
    sd = header["spec"]
    spec = DatasetSpec(
        n=sd["n"], num_classes=sd["num_classes"], seed=sd["seed"], image_shape=tuple(sd["image_shape"]),
        planted_groups=tuple(PlantedGroup(**g) for g in sd["planted_groups"]),
    )
    examples, group_of, sources = [], {}, []
    with open(directory / "dataset.csv", newline="") as f:
        for k, row in enumerate(csv.DictReader(f)):
            i = int(row["id"])
            examples.append(Example(images[k].copy(), int(row["class"]), i, bool(int(row["flipped"]))))
            if row["group_id"] != "":
                group_of[i] = int(row["group_id"])
            sources.append(row["source"])
    if len(examples) != header["count"]:
        raise ValueError("manifest rows do not match the image blob")
    return Dataset(tuple(examples), spec, group_of, tuple(sources))
