"""Class-balanced four-patch batches with per-patch provenance.

Dataset layout under a root directory::

    images/<image_id>.<ext>           8-bit RGB
    labels/<annotator>/<image_id>.png single-channel class/grade map
    masks/<image_id>.png              optional tissue mask {0,255}

DigestPath labels are binary (any non-zero value is cancer); images with no
cancer pixel under any annotator are negatives.  Gleason labels hold raw
grades 0..5 and are merged and tissue-gated on load.
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .labels import AnnotationSet, majority_vote, one_hot, prepare_annotations, read_grade_map
from .preprocess import (
    TissueMaskParams,
    load_rgb_u8,
    make_tissue_mask,
    read_mask,
    to_six_channel,
)

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".tif", ".tiff", ".jpg", ".jpeg")
MAJORITY = "__majority__"
LABEL_SOURCES = ("single_annotator", "all_annotators", "majority_vote", "probabilistic")
INDEX_VERSION = 1


class SamplingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# dihedral augmentation


def orient(arr: np.ndarray, orientation_id: int) -> np.ndarray:
    """Element ``orientation_id`` of D4: optional horizontal flip, then k*90 deg."""
    if not 0 <= orientation_id < 8:
        raise ValueError(f"orientation_id must be in 0..7, got {orientation_id}")
    a = np.fliplr(arr) if orientation_id >= 4 else arr
    return np.ascontiguousarray(np.rot90(a, orientation_id % 4))


def _build_compose_table() -> np.ndarray:
    probe = np.arange(9).reshape(3, 3)
    images = [orient(probe, k) for k in range(8)]
    table = np.zeros((8, 8), dtype=np.int64)
    for a in range(8):
        for b in range(8):
            out = orient(orient(probe, a), b)
            table[a, b] = next(k for k, im in enumerate(images) if np.array_equal(im, out))
    return table


# COMPOSE[a, b]: applying a then b equals applying COMPOSE[a, b]
COMPOSE = _build_compose_table()


@dataclass
class Provenance:
    image_id: str
    center: tuple[int, int]  # (row, col)
    center_class: int
    orientation_id: int = 0
    annotator: str | None = None
    role: str = ""


@dataclass
class Patch:
    pixels: np.ndarray  # side x side x 6
    target: np.ndarray  # side x side x K
    provenance: Provenance


def augment(patch: Patch, orientation_id: int) -> Patch:
    h, w = patch.pixels.shape[:2]
    if h != w:
        raise ValueError(f"augment needs a square patch, got {h}x{w}")
    prov = Provenance(**{**patch.provenance.__dict__})
    prov.orientation_id = int(COMPOSE[patch.provenance.orientation_id, orientation_id])
    return Patch(orient(patch.pixels, orientation_id), orient(patch.target, orientation_id), prov)


@dataclass
class Batch:
    patches: list[Patch]
    seed_state: dict = field(default_factory=dict)

    def pixels(self) -> np.ndarray:
        return np.stack([p.pixels for p in self.patches])

    def targets(self) -> np.ndarray:
        return np.stack([p.target for p in self.patches])

    @property
    def image_ids(self) -> list[str]:
        return [p.provenance.image_id for p in self.patches]


# --------------------------------------------------------------------------
# index


def _reflect_indices(start: int, length: int, size: int) -> np.ndarray:
    idx = np.arange(start, start + length)
    if size == 1:
        return np.zeros_like(idx)
    period = 2 * (size - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= size, period - idx, idx)


def crop(arr: np.ndarray, center: tuple[int, int], side: int) -> np.ndarray:
    """Square crop around ``center`` with reflect padding outside the image."""
    r = _reflect_indices(center[0] - side // 2, side, arr.shape[0])
    c = _reflect_indices(center[1] - side // 2, side, arr.shape[1])
    return arr[np.ix_(r, c)]


def _centers(label: np.ndarray, cls: int, stride: int, limit: int) -> np.ndarray:
    hit = label == cls
    if stride > 1:
        grid = np.zeros_like(hit)
        grid[::stride, ::stride] = True
        on_grid = hit & grid
        # rare classes may miss the grid entirely
        if on_grid.any() or not hit.any():
            hit = on_grid
    pts = np.argwhere(hit).astype(np.int32)
    if limit and len(pts) > limit:
        sel = np.linspace(0, len(pts) - 1, limit).round().astype(np.int64)
        pts = pts[sel]
    return pts


@dataclass
class ImageEntry:
    image_id: str
    image_path: str
    mask_path: str | None
    label_paths: dict[str, str]
    kind: str  # positive / negative / gleason
    size: tuple[int, int]
    # source (annotator or MAJORITY) -> class -> (N, 2) centers
    centers: dict[str, dict[int, np.ndarray]] = field(default_factory=dict)

    @property
    def annotators(self) -> list[str]:
        return sorted(self.label_paths)


@dataclass
class DatasetIndex:
    root: str
    task: str
    entries: list[ImageEntry]
    center_stride: int = 1
    max_centers: int = 0
    tissue: TissueMaskParams = field(default_factory=TissueMaskParams)
    warnings: list[str] = field(default_factory=list)
    cache_size: int = 64
    _cache: OrderedDict = field(default_factory=OrderedDict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def n_classes(self) -> int:
        return 2 if self.task == "digestpath" else 4

    @property
    def by_id(self) -> dict[str, ImageEntry]:
        return {e.image_id: e for e in self.entries}

    @property
    def image_ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def subset(self, image_ids) -> "DatasetIndex":
        keep = set(image_ids)
        return DatasetIndex(self.root, self.task, [e for e in self.entries if e.image_id in keep],
                            self.center_stride, self.max_centers, self.tissue, list(self.warnings),
                            self.cache_size)

    def exclude(self, image_ids) -> "DatasetIndex":
        drop = set(image_ids)
        return self.subset([i for i in self.image_ids if i not in drop])

    # ---- loading

    def _cached(self, key, fn):
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        value = fn()
        with self._lock:
            self._cache[key] = value
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return value

    def _path(self, p: str) -> Path:
        return Path(self.root) / p

    def rgb(self, entry: ImageEntry) -> np.ndarray:
        return self._cached(("rgb", entry.image_id), lambda: load_rgb_u8(self._path(entry.image_path)))

    def tissue_mask(self, entry: ImageEntry) -> np.ndarray:
        def load():
            if entry.mask_path:
                return read_mask(self._path(entry.mask_path))
            return make_tissue_mask(self.rgb(entry), self.tissue)
        return self._cached(("mask", entry.image_id), load)

    def annotations(self, entry: ImageEntry) -> AnnotationSet:
        def load():
            raw = {}
            for a, p in entry.label_paths.items():
                m = read_grade_map(self._path(p))
                raw[a] = (m > 0).astype(np.uint8) if self.task == "digestpath" else m
            return prepare_annotations(entry.image_id, raw, self.tissue_mask(entry), self.task)
        return self._cached(("ann", entry.image_id), load)

    # ---- persistence

    def save(self, path: str | Path) -> Path:
        """Write ``<path>`` (JSON) and ``<path>.centers.npy`` deterministically."""
        path = Path(path)
        arrays = []
        offset = 0
        entries = []
        for e in self.entries:
            cent = {}
            for src in sorted(e.centers):
                cent[src] = {}
                for cls in sorted(e.centers[src]):
                    a = e.centers[src][cls]
                    cent[src][str(cls)] = [offset, len(a)]
                    arrays.append(a.reshape(-1, 2))
                    offset += len(a)
            entries.append({
                "image_id": e.image_id, "image_path": e.image_path, "mask_path": e.mask_path,
                "label_paths": dict(sorted(e.label_paths.items())), "kind": e.kind,
                "size": list(e.size), "centers": cent,
            })
        doc = {
            "version": INDEX_VERSION, "task": self.task, "center_stride": self.center_stride,
            "max_centers": self.max_centers,
            "tissue": {"radius": self.tissue.radius, "min_hole_area": self.tissue.min_hole_area},
            "warnings": self.warnings, "entries": entries,
        }
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        allc = np.concatenate(arrays) if arrays else np.zeros((0, 2), np.int32)
        np.save(_centers_path(path), allc.astype(np.int32))
        return path

    @classmethod
    def load(cls, path: str | Path, root: str | Path | None = None) -> "DatasetIndex":
        path = Path(path)
        doc = json.loads(path.read_text())
        allc = np.load(_centers_path(path))
        entries = []
        for d in doc["entries"]:
            cent = {src: {int(c): allc[o:o + n] for c, (o, n) in per.items()}
                    for src, per in d["centers"].items()}
            entries.append(ImageEntry(d["image_id"], d["image_path"], d["mask_path"],
                                      d["label_paths"], d["kind"], tuple(d["size"]), cent))
        return cls(str(root if root is not None else path.parent), doc["task"], entries,
                   doc["center_stride"], doc["max_centers"], TissueMaskParams(**doc["tissue"]),
                   doc["warnings"])

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(e.image_id.encode())
            for src in sorted(e.centers):
                for c in sorted(e.centers[src]):
                    h.update(f"{src}:{c}".encode())
                    h.update(np.ascontiguousarray(e.centers[src][c]).tobytes())
        return h.hexdigest()


def _centers_path(path: Path) -> Path:
    return path.with_name(path.name + ".centers.npy")


def _rel(path: Path, root: Path) -> str:
    try:
        return str(path.relative_to(root))
    except ValueError:
        return str(path.resolve())


def _find_image(images_dir: Path, stem: str) -> Path | None:
    for ext in IMAGE_EXTS:
        p = images_dir / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def build_index(
    dataset_root: str | Path,
    task: str,
    center_stride: int = 1,
    max_centers: int = 0,
    tissue: TissueMaskParams = TissueMaskParams(),
    out_path: str | Path | None = None,
    mask_dir: str | Path | None = None,
) -> DatasetIndex:
    """Scan a dataset and list candidate centre pixels per image, source and class.

    Class-0 candidates are restricted to tissue.  Tissue masks come from
    ``mask_dir`` (default ``<root>/masks``) when present, otherwise they are
    computed.  Images whose labels do not match the image size are excluded
    and listed in ``index.warnings``.
    """
    if task not in ("digestpath", "gleason"):
        raise ValueError(f"unknown task {task!r}")
    root = Path(dataset_root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise FileNotFoundError(f"missing images directory: {images_dir}")
    labels_dir = root / "labels"
    annotators = sorted(p.name for p in labels_dir.iterdir() if p.is_dir()) if labels_dir.is_dir() else []
    stems = sorted({p.stem for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS})

    index = DatasetIndex(str(root), task, [], center_stride, max_centers, tissue)
    for stem in stems:
        img_path = _find_image(images_dir, stem)
        label_paths = {}
        for a in annotators:
            lp = labels_dir / a / f"{stem}.png"
            if lp.exists():
                label_paths[a] = str(lp.relative_to(root))
        if task == "gleason" and not label_paths:
            index.warnings.append(f"{stem}: no annotations, skipped")
            continue
        mask_path = Path(mask_dir) if mask_dir is not None else root / "masks"
        mask_path = mask_path / f"{stem}.png"
        entry = ImageEntry(stem, str(img_path.relative_to(root)),
                           _rel(mask_path, root) if mask_path.exists() else None,
                           label_paths, "gleason", (0, 0))
        rgb = index.rgb(entry)
        entry.size = tuple(rgb.shape[:2])
        try:
            tissue_mask = index.tissue_mask(entry)
            if tissue_mask.shape != entry.size:
                raise ValueError(f"tissue mask {tissue_mask.shape} vs image {entry.size}")
            aset = index.annotations(entry) if label_paths else AnnotationSet(
                stem, {}, tissue_mask, n_classes=index.n_classes)
            for m in aset.maps.values():
                if m.shape != entry.size:
                    raise ValueError(f"label {m.shape} vs image {entry.size}")
        except ValueError as exc:
            msg = f"{stem}: size mismatch, excluded ({exc})"
            log.warning(msg)
            index.warnings.append(msg)
            index._cache.clear()
            continue

        sources: dict[str, np.ndarray] = {}
        if task == "digestpath":
            label = next(iter(aset.maps.values())) if aset.maps else np.zeros(entry.size, np.uint8)
            sources["label"] = label
            entry.kind = "positive" if (label == 1).any() else "negative"
        else:
            sources.update(aset.maps)
            sources[MAJORITY] = majority_vote(aset)
        for src, label in sources.items():
            per = {}
            for cls in range(index.n_classes):
                lab = label if cls else np.where(tissue_mask, label, 255)
                per[cls] = _centers(lab, cls, center_stride, max_centers)
                # invariant: every listed centre bears its class
                assert all(label[r, c] == cls for r, c in per[cls][:64])
            entry.centers[src] = per
        index.entries.append(entry)
        index._cache.clear()

    if out_path is not None:
        index.save(out_path)
    return index


# --------------------------------------------------------------------------
# batch sampling


def _assign_distinct(slots: list[list[int]], rng: np.random.Generator, tries: int = 64):
    """Pick one candidate per slot, all distinct; None when no assignment found."""
    for _ in range(tries):
        pick = [c[rng.integers(len(c))] for c in slots]
        if len(set(pick)) == len(pick):
            return pick
    # most-constrained-first greedy with random choices
    order = sorted(range(len(slots)), key=lambda i: len(set(slots[i])))
    for _ in range(tries):
        used, pick = set(), [None] * len(slots)
        for i in order:
            free = [c for c in slots[i] if c not in used]
            if not free:
                break
            pick[i] = free[rng.integers(len(free))]
            used.add(pick[i])
        else:
            return pick
    return None


def _make_patch(index, entry, center, cls, side, target, rng, annotator=None, role=""):
    pixels = to_six_channel(crop(index.rgb(entry), center, side)).astype(np.float32)
    prov = Provenance(entry.image_id, (int(center[0]), int(center[1])), int(cls), 0, annotator, role)
    return augment(Patch(pixels, target.astype(np.float32), prov), int(rng.integers(8)))


def _pick_center(rng, pts):
    return tuple(pts[rng.integers(len(pts))])


def sample_batch_digestpath(index: DatasetIndex, rng: np.random.Generator,
                            patch_side: int) -> Batch:
    """Two cancer-centred and one benign-centred patch from distinct positive
    images, plus one tissue-centred patch from a negative image; shuffled."""
    state = rng.bit_generator.state
    ents = index.entries
    cancer = [i for i, e in enumerate(ents) if e.kind == "positive" and len(e.centers["label"][1])]
    benign = [i for i, e in enumerate(ents) if e.kind == "positive" and len(e.centers["label"][0])]
    negative = [i for i, e in enumerate(ents) if e.kind == "negative" and len(e.centers["label"][0])]
    slots = [cancer, cancer, benign, negative]
    pick = _assign_distinct(slots, rng) if all(slots) else None
    if pick is None:
        raise SamplingError(
            f"cannot draw 4 distinct images: {len(cancer)} positive with cancer centres, "
            f"{len(benign)} positive with benign tissue centres, {len(negative)} negative "
            f"with tissue centres (need 3 distinct positives and 1 negative)"
        )
    roles = ["cancer", "cancer", "benign_positive", "negative"]
    classes = [1, 1, 0, 0]
    patches = []
    for i, role, cls in zip(pick, roles, classes):
        e = ents[i]
        center = _pick_center(rng, e.centers["label"][cls])
        label = next(iter(index.annotations(e).maps.values()), None)
        if label is None:
            label = np.zeros(e.size, np.uint8)
        target = one_hot(crop(label, center, patch_side), 2)
        patches.append(_make_patch(index, e, center, cls, patch_side, target, rng, role=role))
    order = rng.permutation(4)
    return Batch([patches[i] for i in order], state)


def parse_label_source(label_source: str) -> tuple[str, str | None]:
    kind, _, arg = label_source.partition(":")
    if kind not in LABEL_SOURCES:
        raise ValueError(f"label_source must be one of {LABEL_SOURCES}, got {label_source!r}")
    if kind == "single_annotator" and not arg:
        raise ValueError("single_annotator needs an annotator id, e.g. single_annotator:3")
    return kind, arg or None


def sample_batch_gleason(index: DatasetIndex, rng: np.random.Generator, patch_side: int,
                         label_source: str = "majority_vote") -> Batch:
    """One patch centred on each merged class 0..3 from four distinct images."""
    state = rng.bit_generator.state
    kind, who = parse_label_source(label_source)
    ents = index.entries
    slots = []
    for cls in range(4):
        if kind == "single_annotator":
            cand = [i for i, e in enumerate(ents) if who in e.centers and len(e.centers[who][cls])]
        elif kind == "all_annotators":
            cand = [i for i, e in enumerate(ents)
                    if any(len(e.centers[a][cls]) for a in e.annotators)]
        else:
            cand = [i for i, e in enumerate(ents) if len(e.centers[MAJORITY][cls])]
        if not cand:
            raise SamplingError(f"class {cls} has no candidate centres under {label_source}")
        slots.append(cand)
    pick = _assign_distinct(slots, rng)
    if pick is None:
        raise SamplingError(
            "cannot draw 4 distinct images covering every class; candidates per class: "
            + ", ".join(f"{c}:{len(s)}" for c, s in enumerate(slots))
        )
    patches = []
    for cls, i in enumerate(pick):
        e = ents[i]
        aset = index.annotations(e)
        annotator = None
        if kind == "single_annotator":
            src = annotator = who
        elif kind == "all_annotators":
            having = [a for a in e.annotators if len(e.centers[a][cls])]
            src = annotator = having[rng.integers(len(having))]
        else:
            src = MAJORITY
        center = _pick_center(rng, e.centers[src][cls])
        if kind == "probabilistic":
            sub = AnnotationSet(e.image_id, {a: crop(m, center, patch_side)
                                             for a, m in aset.maps.items()})
            target = sub.vote_counts() / float(len(sub.maps))
        else:
            label = aset.maps[annotator] if annotator else majority_vote(
                AnnotationSet(e.image_id, {a: crop(m, center, patch_side)
                                           for a, m in aset.maps.items()}))
            if annotator:
                label = crop(label, center, patch_side)
            target = one_hot(label, 4)
        patches.append(_make_patch(index, e, center, cls, patch_side, target, rng, annotator,
                                   role=f"class{cls}"))
    order = rng.permutation(4)
    return Batch([patches[i] for i in order], state)


def sample_batch(index: DatasetIndex, rng: np.random.Generator, patch_side: int,
                 label_source: str = "majority_vote") -> Batch:
    if index.task == "digestpath":
        return sample_batch_digestpath(index, rng, patch_side)
    return sample_batch_gleason(index, rng, patch_side, label_source)


def batch_rng(seed: int, step: int) -> np.random.Generator:
    """Generator for global step ``step``; independent of production order."""
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def batch_stream(index: DatasetIndex, seed: int, start: int, stop: int, patch_side: int,
                 label_source: str = "majority_vote", prefetch: int = 0) -> Iterator[Batch]:
    """Yield the batches for global steps ``start..stop-1``.

    With ``prefetch > 0`` a background thread fills a bounded queue; the
    sequence is the same either way because every step owns its generator.
    """
    def make(step):
        return sample_batch(index, batch_rng(seed, step), patch_side, label_source)

    if prefetch <= 0:
        for step in range(start, stop):
            yield make(step)
        return

    q: queue.Queue = queue.Queue(maxsize=prefetch)
    stop_flag = threading.Event()

    def produce():
        try:
            for step in range(start, stop):
                if stop_flag.is_set():
                    return
                q.put(make(step))
        except BaseException as exc:  # surfaced to the consumer
            q.put(exc)
        q.put(None)

    t = threading.Thread(target=produce, daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is None:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop_flag.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(0.01)
