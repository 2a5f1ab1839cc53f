"""Toy multi-modal datasets: generator, on-disk container, class-wise batching.

Container layout: ``manifest.json`` plus one little-endian binary blob per
tensor group (``train.bin``, ``test.bin``, ...). Each manifest tensor entry
records ``name, shape, dtype, file, offset, length`` and a ``sha256`` of its
bytes; tensors are addressed by offset, so entry order does not matter.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar")
PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.10, 0.85, 0.90],
    [0.95, 0.55, 0.05],
    [0.55, 0.30, 0.10],
    [0.98, 0.98, 0.98],
    [0.05, 0.05, 0.05],
])
_DTYPES = {"f64": np.dtype("<f8"), "u8": np.dtype("u1")}


class DataFormatError(ValueError):
    pass


@dataclass
class GenSpec:
    num_classes: int = 6
    channels: int = 3
    size: int = 32
    train_per_class: int = 500
    test_per_class: int = 200
    clutter: str = "distractors"
    clutter_density: float = 0.3
    caption_dim: int = 16
    caption_noise: float = 0.1
    seed: int = 0
    name: str = "toy"

    def validate(self) -> None:
        if self.num_classes < 1 or self.num_classes > len(PALETTE):
            raise ValueError(f"num_classes must be in [1, {len(PALETTE)}], got {self.num_classes}")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValueError("per-class train/test counts must be positive")
        if self.clutter not in ("none", "distractors"):
            raise ValueError(f"clutter must be 'none' or 'distractors', got {self.clutter!r}")
        if not 0.0 <= self.clutter_density <= 1.0:
            raise ValueError(f"clutter_density must lie in [0, 1], got {self.clutter_density}")
        if self.caption_dim < self.num_classes:
            raise ValueError(
                f"caption_dim={self.caption_dim} < num_classes={self.num_classes}: "
                "orthogonal caption prototypes need d >= C"
            )
        if self.channels != 3:
            raise ValueError("only 3-channel (RGB) images are generated")
        if self.size < 8:
            raise ValueError("image size must be at least 8")
        if self.caption_noise < 0:
            raise ValueError("caption_noise must be non-negative")


@dataclass
class Split:
    images: np.ndarray    # N×C×H×W float64 in [0, 1]
    labels: np.ndarray    # N int64
    masks: np.ndarray     # N×H×W uint8 in {0, 1}
    captions: np.ndarray  # N×d float64

    def __len__(self) -> int:
        return len(self.labels)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass
class Dataset:
    name: str
    num_classes: int
    image_shape: tuple
    caption_dim: int
    splits: dict
    prototypes: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def train(self) -> Split:
        return self.splits["train"]

    @property
    def test(self) -> Split:
        return self.splits["test"]

    def class_mean_captions(self, split: str = "train") -> np.ndarray:
        s = self.splits[split]
        return np.stack([s.captions[s.labels == c].mean(axis=0) for c in range(self.num_classes)])


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------

def shape_mask(kind: str, size: int, cy: float, cx: float, r: float, angle: float = 0.0) -> np.ndarray:
    """Boolean raster of a shape centred at (cy, cx) with half-extent ``r`` (pixels)."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if angle:
        ca, sa = np.cos(angle), np.sin(angle)
        dy, dx = ca * dy - sa * dx, sa * dy + ca * dx
    if kind == "circle":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "triangle":
        # apex up; base at dy = +r
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.55)
    if kind == "cross":
        arm = 0.32 * r
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "bar":
        return (np.abs(dy) <= 0.3 * r) & (np.abs(dx) <= r)
    raise ValueError(f"unknown shape {kind!r}")


def _smooth_background(rng: np.random.Generator, channels: int, size: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(channels, 4, 4))
    zoomed = ndimage.zoom(coarse, (1, size / 4, size / 4), order=1, mode="nearest")
    fine = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=(channels, size, size)), sigma=(0, 1.5, 1.5))
    bg = 0.3 + 0.4 * zoomed + 0.15 * fine
    return np.clip(bg, 0.0, 1.0)


def is_class_pair(kind_idx: int, col_idx: int, num_classes: int) -> bool:
    return col_idx < num_classes and kind_idx == col_idx % len(SHAPES)


def _distractor_pair(rng: np.random.Generator, num_classes: int) -> tuple[int, int]:
    """A (shape, colour) pair that is not any class's own pair."""
    while True:
        kind_idx = int(rng.integers(len(SHAPES)))
        col_idx = int(rng.integers(len(PALETTE)))
        if not is_class_pair(kind_idx, col_idx, num_classes):
            return kind_idx, col_idx


def _render_sample(rng: np.random.Generator, label: int, spec: GenSpec):
    size = spec.size
    img = _smooth_background(rng, spec.channels, size)
    if spec.clutter == "distractors":
        count = 1 + rng.binomial(2, spec.clutter_density)
        for _ in range(count):
            kind_idx, col_idx = _distractor_pair(rng, spec.num_classes)
            r = rng.uniform(0.10, 0.10 + 0.12 * spec.clutter_density + 0.04) * size
            cy, cx = rng.uniform(r * 0.5, size - r * 0.5, size=2)
            m = shape_mask(SHAPES[kind_idx], size, cy, cx, r, rng.uniform(0, np.pi))
            img[:, m] = PALETTE[col_idx][:, None]
    kind = SHAPES[label % len(SHAPES)]
    colour = PALETTE[label]
    r = rng.uniform(0.17, 0.26) * size
    cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
    mask = shape_mask(kind, size, cy, cx, r)
    img[:, mask] = colour[:, None]
    return img, mask.astype(np.uint8)


def caption_prototypes(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal class prototype vectors (rows)."""
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return np.ascontiguousarray(q[:, :num_classes].T)


def generate_arrays(spec: GenSpec) -> Dataset:
    """Build the dataset in memory. Images, masks and captions use separate RNG streams."""
    spec.validate()
    img_ss, cap_ss, proto_ss = np.random.SeedSequence(spec.seed).spawn(3)
    img_rng = np.random.default_rng(img_ss)
    cap_rng = np.random.default_rng(cap_ss)
    protos = caption_prototypes(spec.num_classes, spec.caption_dim, np.random.default_rng(proto_ss))
    splits = {}
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        labels = np.tile(np.arange(spec.num_classes), per_class)
        n = len(labels)
        images = np.empty((n, spec.channels, spec.size, spec.size))
        masks = np.empty((n, spec.size, spec.size), dtype=np.uint8)
        for i, y in enumerate(labels):
            images[i], masks[i] = _render_sample(img_rng, int(y), spec)
        noise = cap_rng.normal(0.0, 1.0, size=(n, spec.caption_dim)) * spec.caption_noise
        captions = protos[labels] + noise
        splits[split] = Split(images, labels.astype(np.int64), masks, captions)
    return Dataset(spec.name, spec.num_classes, (spec.channels, spec.size, spec.size),
                   spec.caption_dim, splits, protos, {"gen": asdict(spec)})


def generate(spec: GenSpec, out_dir) -> Path:
    """Generate a dataset and write it to ``out_dir``; returns the manifest path."""
    ds = generate_arrays(spec)
    return save(ds, out_dir, seed=spec.seed)


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------

def write_container(out_dir, tensors: dict, header: dict) -> Path:
    """Write ``{"group/name": array}`` tensors plus a JSON header.

    Arrays go to ``<group>.bin``; uint8 arrays are stored as ``u8``, all
    others as little-endian ``f64``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataFormatError(f"cannot create output directory {out}: {exc}") from exc
    groups: dict[str, list] = {}
    for key, arr in tensors.items():
        group = key.split("/", 1)[0] if "/" in key else "data"
        groups.setdefault(group, []).append((key, arr))
    entries = []
    for group, items in groups.items():
        fname = f"{group}.bin"
        offset = 0
        with open(out / fname, "wb") as fh:
            for key, arr in items:
                arr = np.asarray(arr)
                dtype = "u8" if arr.dtype == np.uint8 else "f64"
                raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
                fh.write(raw)
                entries.append({
                    "name": key, "shape": list(arr.shape), "dtype": dtype, "file": fname,
                    "offset": offset, "length": len(raw), "sha256": hashlib.sha256(raw).hexdigest(),
                })
                offset += len(raw)
    manifest = dict(header)
    manifest["tensors"] = entries
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_container(path) -> tuple[dict, dict]:
    """Read a container; returns (manifest, {name: array})."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    root = path.parent
    blobs: dict[str, bytes] = {}
    out = {}
    for entry in manifest["tensors"]:
        name, fname = entry["name"], entry["file"]
        if fname not in blobs:
            fpath = root / fname
            if not fpath.exists():
                raise DataFormatError(f"tensor {name!r}: data file {fname} is missing")
            blobs[fname] = fpath.read_bytes()
        blob = blobs[fname]
        start, length = int(entry["offset"]), int(entry["length"])
        if start + length > len(blob):
            raise DataFormatError(
                f"tensor {name!r}: file {fname} is truncated ({len(blob)} bytes, need {start + length})"
            )
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise DataFormatError(f"tensor {name!r}: unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) * dtype.itemsize != length:
            raise DataFormatError(f"tensor {name!r}: shape {shape} does not match byte length {length}")
        raw = blob[start:start + length]
        if "sha256" in entry and hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise DataFormatError(f"tensor {name!r}: checksum mismatch in {fname}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        out[name] = arr.astype(np.float64 if dtype.kind == "f" else np.uint8)
    return manifest, out


def save(ds: Dataset, out_dir, seed: int | None = None, extra: dict | None = None) -> Path:
    tensors = {}
    for split, s in ds.splits.items():
        if len(s.labels) and s.labels.max() > 255:
            raise DataFormatError("labels above 255 do not fit the u8 label encoding")
        tensors[f"{split}/images"] = s.images
        tensors[f"{split}/labels"] = s.labels.astype(np.uint8)
        tensors[f"{split}/masks"] = s.masks.astype(np.uint8)
        tensors[f"{split}/captions"] = s.captions
    if ds.prototypes is not None:
        tensors["meta/prototypes"] = ds.prototypes
    header = {
        "name": ds.name,
        "classes": ds.num_classes,
        "splits": {k: len(v) for k, v in ds.splits.items()},
        "shape": list(ds.image_shape),
        "caption_dim": ds.caption_dim,
        "seed": seed,
    }
    header.update(ds.meta)
    if extra:
        header.update(extra)
    return write_container(out_dir, tensors, header)


def load(path) -> Dataset:
    """Load a dataset container written by :func:`save`."""
    manifest, arrays = read_container(path)
    splits = {}
    for split in manifest["splits"]:
        try:
            # masks are optional; masked methods check for them
            masks = arrays.get(f"{split}/masks", np.zeros((0,) + tuple(manifest["shape"][1:]), dtype=np.uint8))
            s = Split(arrays[f"{split}/images"], arrays[f"{split}/labels"].astype(np.int64),
                      masks, arrays[f"{split}/captions"])
        except KeyError as exc:
            raise DataFormatError(f"split {split!r} is missing tensor {exc.args[0]!r}") from None
        if len(s.labels) != manifest["splits"][split]:
            raise DataFormatError(f"split {split!r}: manifest count {manifest['splits'][split]} != {len(s.labels)}")
        for arr in (s.images, s.labels, s.masks, s.captions):
            arr.flags.writeable = False
        splits[split] = s
    meta = {k: v for k, v in manifest.items()
            if k not in ("name", "classes", "splits", "shape", "caption_dim", "seed", "tensors")}
    meta["seed"] = manifest.get("seed")
    return Dataset(manifest["name"], int(manifest["classes"]), tuple(manifest["shape"]),
                   int(manifest["caption_dim"]), splits, arrays.get("meta/prototypes"), meta)


# ---------------------------------------------------------------------------
# batching and diagnostics
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    captions: np.ndarray
    indices: np.ndarray


def take(split: Split, idx: np.ndarray) -> Batch:
    return Batch(split.images[idx], split.labels[idx], split.masks[idx], split.captions[idx], idx)


def sample_class_batch(split: Split, c: int, n_b: int, rng: np.random.Generator) -> Batch:
    """``n_b`` distinct samples of class ``c`` in an order drawn from ``rng``."""
    idx = split.class_indices(c)
    if n_b > len(idx):
        raise ValueError(f"batch size {n_b} exceeds the {len(idx)} samples of class {c}")
    return take(split, idx[rng.permutation(len(idx))[:n_b]])


def linear_probe_accuracy(train: Split, test: Split, num_classes: int, ridge: float = 100.0) -> float:
    """Test accuracy of a one-pass ridge least-squares classifier on raw pixels."""
    def design(s):
        x = s.images.reshape(len(s), -1) - 0.5
        return np.hstack([x, np.ones((len(s), 1))])

    a = design(train)
    y = np.eye(num_classes)[train.labels]
    w = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ y)
    pred = np.argmax(design(test) @ w, axis=1)
    return float(np.mean(pred == test.labels))


def nearest_prototype_accuracy(split: Split, prototypes: np.ndarray) -> float:
    d = ((split.captions[:, None, :] - prototypes[None]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == split.labels))


def mean_pairwise_cosine(vectors: np.ndarray) -> float:
    v = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    sim = v @ v.T
    iu = np.triu_indices(len(v), k=1)
    return float(np.mean(sim[iu]))
