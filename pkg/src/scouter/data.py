"""Dataset loading (IDX, PGM/PPM + CSV manifest), taxonomy trees, normalization."""
from __future__ import annotations

import csv
import gzip
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ConsistencyError, FormatError, ValidationError
from .explain import bilinear_resize
from .pnm import read_pnm

IDX_IMAGES = 2051
IDX_LABELS = 2049
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081
DEFAULT_IMAGE_SIZE = (260, 260)

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


@dataclass
class Dataset:
    """``images``: N x c x H x W float32 in [0, 1]; ``bboxes``: N x 4 pixel (x, y, w, h), NaN rows when absent."""

    images: np.ndarray
    labels: np.ndarray
    bboxes: Optional[np.ndarray] = None
    paths: Optional[List[str]] = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.bboxes is not None:
            validate_bboxes(self.bboxes, self.images.shape[-2:])

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def has_bboxes(self) -> bool:
        return self.bboxes is not None and bool(np.all(np.isfinite(self.bboxes)))

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.images[index],
            self.labels[index],
            None if self.bboxes is None else self.bboxes[index],
            None if self.paths is None else [self.paths[i] for i in index],
        )

    def head(self, count: Optional[int]) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return self.subset(np.arange(count))


def validate_bboxes(bboxes: np.ndarray, image_hw) -> None:
    h, w = image_hw
    for i, (x, y, bw, bh) in enumerate(np.asarray(bboxes, dtype=np.float64)):
        if not np.isfinite(x):
            continue
        if bw <= 0 or bh <= 0 or x < 0 or y < 0 or x + bw > w or y + bh > h:
            raise ValidationError(f"bbox {i} ({x}, {y}, {bw}, {bh}) lies outside the {w}x{h} image")


def ink_bboxes(images: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Tight ``(x, y, w, h)`` box around pixels brighter than ``threshold`` (channel max).

    Digits carry no box annotations; the stroke extent stands in for the
    object. Images with no pixel above the threshold get a NaN row.
    """
    images = np.asarray(images)
    ink = images.max(axis=1) > threshold
    out = np.full((len(images), 4), np.nan)
    for i, m in enumerate(ink):
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        if rows.size:
            out[i] = (cols[0], rows[0], cols[-1] - cols[0] + 1, rows[-1] - rows[0] + 1)
    return out


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_idx(path, expected_magic: Optional[int] = None) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise FormatError(f"{path}: not an IDX file")
    magic = int.from_bytes(raw[:4], "big")
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: magic {magic}, expected {expected_magic}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - header < count * dtype.itemsize:
        raise FormatError(f"{path}: expected {count} values, file is truncated")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    code = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09, np.dtype(np.int16): 0x0B,
            np.dtype(np.int32): 0x0C, np.dtype(np.float32): 0x0D, np.dtype(np.float64): 0x0E}[arr.dtype]
    header = bytes([0, 0, code, arr.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in arr.shape)
    body = arr.astype(np.dtype(_IDX_DTYPES[code])).tobytes()
    with open(path, "wb") as raw:
        if os.fspath(path).endswith(".gz"):
            # empty name and fixed mtime keep the gzip header byte-identical
            with gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as fh:
                fh.write(header + body)
        else:
            raw.write(header + body)


def load_idx(images_path, labels_path) -> Dataset:
    """MNIST-style IDX pair -> Dataset with pixels scaled to [0, 1]."""
    pix = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if pix.ndim != 3:
        raise FormatError(f"{images_path}: expected count x rows x cols, got {pix.shape}")
    if len(pix) != len(labels):
        raise ConsistencyError(f"{len(pix)} images in {images_path} but {len(labels)} labels in {labels_path}")
    images = (pix.astype(np.float32) / np.float32(255.0))[:, None]
    return Dataset(images, labels.astype(np.int64))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(root=None) -> Optional[str]:
    """Directory holding the four MNIST IDX files (optionally gzipped), or None.

    Search order: ``root``, ``$SCOUTER_MNIST_DIR``, ``./data/mnist``, then the
    repository's ``data/mnist`` and the bundled 10k-digit ``data/mnist-10k``.
    """
    repo_data = os.path.join(os.path.dirname(__file__), "..", "..", "data")
    candidates = [root] if root else [os.environ.get("SCOUTER_MNIST_DIR"), "data/mnist",
                                      os.path.join(repo_data, "mnist"), os.path.join(repo_data, "mnist-10k")]
    for d in candidates:
        if d and all(_idx_path(d, f) for pair in MNIST_FILES.values() for f in pair):
            return os.path.abspath(d)
    return None


def _idx_path(root, name) -> Optional[str]:
    for suffix in ("", ".gz"):
        p = os.path.join(root, name + suffix)
        if os.path.exists(p):
            return p
    return None


def load_mnist(root, split: str) -> Dataset:
    img, lab = MNIST_FILES[split]
    ip, lp = _idx_path(root, img), _idx_path(root, lab)
    if ip is None or lp is None:
        raise FileNotFoundError(f"MNIST {split} files not found under {root}")
    return load_idx(ip, lp)


def _resize_image(img: np.ndarray, size) -> np.ndarray:
    if tuple(img.shape[1:]) == tuple(size):
        return img
    return np.stack([bilinear_resize(ch, *size) for ch in img]).astype(np.float32)


def load_image_dir(root_path, manifest, size: Optional[Tuple[int, int]] = DEFAULT_IMAGE_SIZE) -> Dataset:
    """Images listed in a ``path,label[,x,y,w,h]`` CSV manifest, resized to ``size``.

    Boxes are validated against the original image and then scaled with it.
    """
    manifest_path = manifest if os.path.isabs(os.fspath(manifest)) else os.path.join(root_path, manifest)
    images, labels, boxes, paths = [], [], [], []
    with open(manifest_path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() == "path":
                continue
            if len(row) not in (2, 6):
                raise FormatError(f"{manifest_path}:{lineno}: expected path,label[,x,y,w,h]")
            rel = row[0].strip()
            full = os.path.join(root_path, rel)
            if not os.path.exists(full):
                raise FileNotFoundError(f"image listed in manifest not found: {full}")
            if os.path.splitext(rel)[1].lower() not in (".pgm", ".ppm", ".pnm"):
                raise FormatError(f"{full}: unsupported image format (PGM/PPM only)")
            img = read_pnm(full).astype(np.float32) / np.float32(255.0)
            box = np.full(4, np.nan)
            if len(row) == 6:
                box = np.array([float(v) for v in row[2:]])
                try:
                    validate_bboxes(box[None], img.shape[1:])
                except ValidationError as err:
                    raise ValidationError(f"{manifest_path}:{lineno}: {err}") from None
            if size is not None:
                sy, sx = size[0] / img.shape[1], size[1] / img.shape[2]
                box = box * np.array([sx, sy, sx, sy])
                img = _resize_image(img, size)
            images.append(img)
            labels.append(int(row[1]))
            boxes.append(box)
            paths.append(rel)
    if not images:
        raise FormatError(f"{manifest_path}: manifest lists no images")
    if len({im.shape for im in images}) != 1:
        raise ConsistencyError("images differ in shape; pass a target size")
    bb = np.stack(boxes)
    return Dataset(np.stack(images), np.array(labels, dtype=np.int64), None if np.all(np.isnan(bb)) else bb, paths)


def standardize(images: np.ndarray, mean, std) -> np.ndarray:
    """``(x - mean) / std`` per channel (axis 1 of an N x c x H x W batch or axis 0 of one image)."""
    images = np.asarray(images)
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    std = np.atleast_1d(np.asarray(std, dtype=np.float64))
    if np.any(std <= 0):
        raise ConfigError(f"std must be positive, got {std}")
    shape = (-1, 1, 1) if images.ndim == 3 else (1, -1, 1, 1)
    out = (images - mean.reshape(shape)) / std.reshape(shape)
    return out.astype(images.dtype if images.dtype.kind == "f" else np.float32)


def destandardize(images: np.ndarray, mean, std) -> np.ndarray:
    images = np.asarray(images)
    shape = (-1, 1, 1) if images.ndim == 3 else (1, -1, 1, 1)
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64)).reshape(shape)
    std = np.atleast_1d(np.asarray(std, dtype=np.float64)).reshape(shape)
    return images * std + mean


def epoch_order(size: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, 2, epoch]).permutation(size)


def iterate_batches(size: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    order = epoch_order(size, seed, epoch)
    for i in range(0, size, batch_size):
        yield order[i:i + batch_size]


# ---------------------------------------------------------------- taxonomy

@dataclass
class TaxonomyTree:
    """Rooted category tree; the root has depth 1."""

    parent: Dict[int, int]
    names: Dict[int, str]
    categories: List[int] = field(default_factory=list)  # category index -> node id
    _depth: Dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        roots = [k for k, p in self.parent.items() if p == -1]
        if len(roots) != 1:
            raise ValidationError(f"taxonomy needs exactly one root, found {len(roots)}: {roots}")
        self.root = roots[0]
        for k, p in self.parent.items():
            if p != -1 and p not in self.parent:
                raise ValidationError(f"node {k} has unknown parent {p}")
        self._depth = {}
        for k in self.parent:
            self._compute_depth(k)
        if not self.categories:
            children = set(self.parent.values())
            self.categories = [k for k in self.parent if k not in children]
        for c in self.categories:
            if c not in self.parent:
                raise ValidationError(f"category node {c} not in tree")
        if len(set(self.categories)) != len(self.categories):
            raise ValidationError("two categories map to the same node")

    def _compute_depth(self, node: int) -> int:
        path = []
        seen = set()
        cur = node
        while cur != -1 and cur not in self._depth:
            if cur in seen:
                raise ValidationError(f"cycle in taxonomy through node {cur}")
            seen.add(cur)
            path.append(cur)
            cur = self.parent[cur]
        base = 0 if cur == -1 else self._depth[cur]
        for i, k in enumerate(reversed(path), 1):
            self._depth[k] = base + i
        return self._depth[node]

    def depth(self, node: int) -> int:
        return self._depth[node]

    def ancestors(self, node: int) -> List[int]:
        """Path from ``node`` up to the root, inclusive."""
        out = []
        while node != -1:
            out.append(node)
            node = self.parent[node]
        return out

    def node_of(self, category: int) -> int:
        if not 0 <= category < len(self.categories):
            raise KeyError(f"unknown category {category}")
        return self.categories[category]

    @property
    def n_categories(self) -> int:
        return len(self.categories)


def parse_taxonomy(text: str, category_names: Optional[Sequence[str]] = None) -> TaxonomyTree:
    """Parse ``id parent_id name`` lines.

    Categories map to leaf nodes in file order, or, when ``category_names``
    is given, to the nodes carrying those names.
    """
    parent: Dict[int, int] = {}
    names: Dict[int, str] = {}
    order: List[int] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(maxsplit=2)
        if len(parts) < 2:
            raise FormatError(f"taxonomy line {lineno}: expected 'id parent_id name'")
        node, par = int(parts[0]), int(parts[1])
        if node in parent:
            raise ValidationError(f"taxonomy line {lineno}: duplicate node id {node}")
        parent[node] = par
        names[node] = parts[2] if len(parts) > 2 else str(node)
        order.append(node)
    categories: List[int] = []
    if category_names is not None:
        by_name = {}
        for k in order:
            by_name.setdefault(names[k], k)
        missing = [c for c in category_names if c not in by_name]
        if missing:
            raise ValidationError(f"categories missing from taxonomy: {missing}")
        categories = [by_name[c] for c in category_names]
    elif parent:
        children = set(parent.values())
        categories = [k for k in order if k not in children]
    return TaxonomyTree(parent, names, categories)


def load_taxonomy(path, category_names: Optional[Sequence[str]] = None) -> TaxonomyTree:
    with open(path) as fh:
        return parse_taxonomy(fh.read(), category_names)
