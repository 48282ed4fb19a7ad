"""Bag files, manifests, the synthetic cluster-counting generator and
stratified splitting.

Bag file layout (little-endian)::

    b"DAGB" | version u32 = 1 | N u32 | D u32 | label u32
    | coords  N*2 float32 (x, y per row)
    | features N*D float32 (row-major)
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, FormatError, InputError

MAGIC = b"DAGB"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")
BAG_SUFFIX = ".dagbag"


@dataclass(eq=False)
class Bag:
    """One slide: N patch embeddings, their pixel coordinates and a label.

    ``lesion_mask`` is only set by the synthetic generator and is not part
    of the file format.
    """

    features: np.ndarray
    coords: np.ndarray
    label: int
    id: str = ""
    lesion_mask: np.ndarray | None = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float32)
        if self.features.ndim != 2 or self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise InputError(
                f"bag {self.id!r}: features must be [N, D] and coords [N, 2], "
                f"got {list(self.features.shape)} and {list(self.coords.shape)}"
            )
        if self.features.shape[0] != self.coords.shape[0]:
            raise InputError(
                f"bag {self.id!r}: {self.features.shape[0]} feature rows but "
                f"{self.coords.shape[0]} coordinates"
            )
        if self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise InputError(f"bag {self.id!r}: N and D must be at least 1")
        if not np.all(np.isfinite(self.coords)):
            raise InputError(f"bag {self.id!r}: non-finite coordinates")
        self.label = int(self.label)
        self.features.setflags(write=False)
        self.coords.setflags(write=False)

    @property
    def n_patches(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (
            self.label == other.label
            and self.features.shape == other.features.shape
            and np.array_equal(self.features.view(np.uint32), other.features.view(np.uint32))
            and np.array_equal(self.coords.view(np.uint32), other.coords.view(np.uint32))
        )

    def permuted(self, perm):
        """Copy with rows (features, coords, mask) reordered jointly."""
        perm = np.asarray(perm)
        mask = None if self.lesion_mask is None else self.lesion_mask[perm]
        return Bag(self.features[perm], self.coords[perm], self.label, self.id, mask)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def encode_bag(bag):
    n, d = bag.features.shape
    header = _HEADER.pack(MAGIC, VERSION, n, d, bag.label)
    return (
        header
        + bag.coords.astype("<f4", copy=False).tobytes()
        + bag.features.astype("<f4", copy=False).tobytes()
    )


def decode_bag(buf, bag_id=""):
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes", offset=len(buf))
    magic, version, n, d, label = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if n == 0:
        raise FormatError("patch count N is zero", offset=8)
    if d == 0:
        raise FormatError("feature dimension D is zero", offset=12)
    pos = _HEADER.size
    need = pos + 8 * n + 4 * n * d
    if len(buf) < need:
        if len(buf) < pos + 8 * n:
            raise FormatError(f"truncated coordinates: expected {n} rows", offset=len(buf))
        rows = (len(buf) - pos - 8 * n) // (4 * d)
        raise FormatError(
            f"truncated features: header says N={n} but payload holds {rows} rows",
            offset=len(buf),
        )
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", offset=need)
    coords = np.frombuffer(buf, dtype="<f4", count=2 * n, offset=pos).reshape(n, 2)
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos + 8 * n).reshape(n, d)
    try:
        return Bag(feats.astype(np.float32), coords.astype(np.float32), label, bag_id)
    except InputError as exc:
        raise FormatError(str(exc), offset=pos) from exc


def write_bag(bag, path):
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path):
    path = Path(path)
    return decode_bag(path.read_bytes(), bag_id=path.stem)


def write_manifest(records, path):
    """``records`` is a list of dicts with keys id, path, label."""
    rows = [{"id": r["id"], "path": str(r["path"]), "label": int(r["label"])} for r in records]
    Path(path).write_text(json.dumps(rows, indent=1) + "\n")


def read_manifest(path):
    path = Path(path)
    rows = json.loads(path.read_text())
    if not isinstance(rows, list):
        raise FormatError("manifest must be a JSON list")
    out = []
    for i, r in enumerate(rows):
        try:
            out.append({"id": str(r["id"]), "path": str(r["path"]), "label": int(r["label"])})
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"manifest record {i} is malformed: {exc}") from exc
    return out


def load_dataset(manifest_path):
    """Read every bag listed in a manifest; relative paths resolve against it."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    bags = []
    for rec in read_manifest(manifest_path):
        p = Path(rec["path"])
        bag = read_bag(p if p.is_absolute() else base / p)
        bag.id = rec["id"]
        if bag.label != rec["label"]:
            raise FormatError(
                f"bag {rec['id']!r}: file label {bag.label} disagrees with manifest {rec['label']}"
            )
        bags.append(bag)
    return bags


def save_dataset(bags, directory):
    """Write bags as ``<id>.dagbag`` plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for bag in bags:
        name = bag.id + BAG_SUFFIX
        write_bag(bag, directory / name)
        records.append({"id": bag.id, "path": name, "label": bag.label})
    manifest = directory / "manifest.json"
    write_manifest(records, manifest)
    return manifest


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_bags: int = 300
    classes: int = 3
    patches: int = 64
    dim: int = 64
    grid_pitch: float = 256.0
    cluster_radius: float = 384.0
    noise_sigma: float = 1.0
    seed: int = 0
    jitter: float = 0.15
    lesion_scale: float = 3.0

    def validate(self):
        for key in ("n_bags", "classes", "patches", "dim", "grid_pitch",
                    "cluster_radius", "noise_sigma"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)!r}")
        if self.classes < 2:
            raise ConfigError(f"classes must be at least 2, got {self.classes}")
        if not 0 <= self.jitter < 0.5:
            raise ConfigError(f"jitter must be in [0, 0.5), got {self.jitter}")
        side = math.ceil(math.sqrt(self.patches))
        rows = math.ceil(self.patches / side)
        extent = min(side, rows) * self.grid_pitch
        if 2 * self.cluster_radius >= extent:
            raise ConfigError(
                f"cluster_radius {self.cluster_radius} does not fit a grid of "
                f"{side}x{rows} cells at pitch {self.grid_pitch}"
            )


def grid_shape(n):
    side = math.ceil(math.sqrt(n))
    return side, math.ceil(n / side)


def _place_centers(rng, coords, count, min_sep, allowed, tries=200):
    """Pick ``count`` allowed patch positions pairwise at least ``min_sep`` apart."""
    candidates = np.flatnonzero(allowed)
    for _ in range(tries):
        chosen = []
        for j in rng.permutation(candidates):
            c = coords[j]
            if all(np.hypot(*(c - coords[k])) >= min_sep for k in chosen):
                chosen.append(j)
                if len(chosen) == count:
                    return coords[chosen]
    return None


def gen_synthetic(config=None, **overrides):
    """Bags whose label equals the number of planted lesion clusters.

    Patches sit on a jittered square grid.  Background features are
    ``N(0, sigma^2 I)``; each cluster is every patch within
    ``cluster_radius`` of a centre patch, and those patches draw from
    ``N(mu, sigma^2 I)`` with ``mu`` a fixed direction of norm
    ``lesion_scale``.  No disc is clipped by the slide border, and discs
    are at least two grid pitches apart so distinct clusters never touch.
    """
    cfg = config or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**cfg.__dict__, **overrides})
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    direction = rng.standard_normal(cfg.dim)
    mu = cfg.lesion_scale * direction / np.linalg.norm(direction)

    side, rows = grid_shape(cfg.patches)
    extent = np.array([side, rows], dtype=np.float64) * cfg.grid_pitch
    cells = np.arange(cfg.patches)
    base = np.stack([cells % side, cells // side], axis=1).astype(np.float64)
    min_sep = 2 * cfg.cluster_radius + 2 * cfg.grid_pitch
    width = len(str(cfg.n_bags - 1))

    labels = np.arange(cfg.n_bags) % cfg.classes
    rng.shuffle(labels)
    bags = []
    for b, label in enumerate(labels):
        jit = rng.uniform(-cfg.jitter, cfg.jitter, size=base.shape)
        coords = (base + 0.5 + jit) * cfg.grid_pitch
        feats = rng.normal(0.0, cfg.noise_sigma, size=(cfg.patches, cfg.dim))
        mask = np.zeros(cfg.patches, dtype=bool)
        if label > 0:
            # whole discs only: overhanging the edge by under half a pitch
            # leaves no would-be patch position outside the slide inside the disc
            r = cfg.cluster_radius - cfg.grid_pitch / 2
            allowed = np.all((coords >= r) & (coords <= extent - r), axis=1)
            centers = _place_centers(rng, coords, int(label), min_sep, allowed)
            if centers is None:
                raise ConfigError(
                    f"cannot fit {label} separated clusters of radius "
                    f"{cfg.cluster_radius} into {cfg.patches} patches"
                )
            for c in centers:
                inside = np.hypot(*(coords - c).T) <= cfg.cluster_radius
                mask |= inside
            feats[mask] += mu
        bag = Bag(feats.astype(np.float32), coords.astype(np.float32), int(label),
                  f"bag_{b:0{width}d}", mask)
        bags.append(bag)
    return bags


def lesion_clusters(bag, radius):
    """Connected groups of lesion patches, linking patches closer than ``radius``."""
    if bag.lesion_mask is None:
        raise InputError(f"bag {bag.id!r} carries no lesion mask")
    idx = np.flatnonzero(bag.lesion_mask)
    pts = bag.coords[idx].astype(np.float64)
    groups = []
    unseen = set(range(len(idx)))
    while unseen:
        frontier = [unseen.pop()]
        group = []
        while frontier:
            a = frontier.pop()
            group.append(a)
            near = [b for b in unseen if np.hypot(*(pts[a] - pts[b])) <= radius]
            for b in near:
                unseen.discard(b)
            frontier.extend(near)
        groups.append(sorted(idx[group].tolist()))
    return groups


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    fold_seed: int = 0

    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def _allocate(n, ratios):
    """Largest-remainder apportionment of ``n`` items to ``ratios``."""
    total = sum(ratios)
    exact = [n * r / total for r in ratios]
    counts = [math.floor(x) for x in exact]
    remainders = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in remainders[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_stratified(manifest, ratios=(0.7, 0.2, 0.1), seed=0, min_per_class=3):
    """Per-class seeded shuffle followed by proportional assignment.

    ``manifest`` is a sequence of ``(id, label)`` pairs.  Parts keep the
    manifest order of their members.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise InputError(f"ratios must be three non-negative numbers, got {ratios!r}")
    ids = [str(i) for i, _ in manifest]
    if len(set(ids)) != len(ids):
        raise InputError("manifest contains duplicate ids")
    by_class = {}
    for pos, (_, label) in enumerate(manifest):
        by_class.setdefault(int(label), []).append(pos)
    for label, members in sorted(by_class.items()):
        if len(members) < min_per_class:
            raise InputError(
                f"class {label} has {len(members)} samples; at least {min_per_class} required"
            )
    rng = np.random.default_rng(seed)
    assignment = {}
    for label in sorted(by_class):
        members = np.array(by_class[label])
        shuffled = members[rng.permutation(len(members))]
        n_train, n_val, _ = _allocate(len(members), ratios)
        for k, pos in enumerate(shuffled):
            assignment[pos] = 0 if k < n_train else (1 if k < n_train + n_val else 2)
    parts = ([], [], [])
    for pos, bag_id in enumerate(ids):
        parts[assignment[pos]].append(bag_id)
    return DatasetSplit(*parts, fold_seed=seed)


def ensure_directory(path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create directory {path}: {exc.strerror}") from exc
    if not os.access(path, os.W_OK):
        raise OSError(f"directory {path} is not writable")
    return path
