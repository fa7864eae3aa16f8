"""Label transforms: grade merging, tissue gating, annotator fusion, encodings.

Class spaces:

* ``digestpath_binary`` -- {0, 1}
* ``gleason_raw`` -- Gleason grades {0..5}, 0 meaning benign / background
* ``gleason_merged`` -- grades {0, 3, 4, 5} re-indexed to {0, 1, 2, 3};
  grades 1 and 2 fold into 0
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CLASS_SPACES = {
    "digestpath_binary": 2,
    "gleason_raw": 6,
    "gleason_merged": 4,
}
MERGE_LUT = np.array([0, 0, 0, 1, 2, 3], dtype=np.uint8)
MERGED_LEGEND = {0: "benign", 1: "gleason 3", 2: "gleason 4", 3: "gleason 5"}


def check_class_space(grades: np.ndarray, space: str) -> None:
    k = CLASS_SPACES[space]
    if grades.size and (grades.min() < 0 or grades.max() >= k):
        bad = np.unique(grades[(grades < 0) | (grades >= k)])
        raise ValueError(f"values {bad.tolist()} outside class space {space!r} (0..{k - 1})")


def merge_low_grades(grades: np.ndarray) -> np.ndarray:
    grades = np.asarray(grades)
    check_class_space(grades, "gleason_raw")
    return MERGE_LUT[grades]


def apply_tissue_gate(grades: np.ndarray, tissue: np.ndarray) -> np.ndarray:
    grades = np.asarray(grades)
    tissue = np.asarray(tissue, dtype=bool)
    if grades.shape != tissue.shape:
        raise ValueError(f"label {grades.shape} and tissue mask {tissue.shape} differ in size")
    return np.where(tissue, grades, 0).astype(grades.dtype)


@dataclass
class AnnotationSet:
    """Per-image annotator maps (already merged and tissue-gated) plus tissue mask."""

    image_id: str
    maps: dict[str, np.ndarray]
    tissue: np.ndarray | None = None
    n_classes: int = 4
    _stack: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shapes = {m.shape for m in self.maps.values()}
        if len(shapes) > 1:
            raise ValueError(f"{self.image_id}: annotator maps differ in size: {sorted(shapes)}")
        if self.tissue is not None and shapes and self.tissue.shape not in shapes:
            raise ValueError(f"{self.image_id}: tissue mask size {self.tissue.shape} differs")

    @property
    def annotators(self) -> list[str]:
        return sorted(self.maps)

    def vote_counts(self) -> np.ndarray:
        """H x W x K integer votes per class."""
        if not self.maps:
            raise ValueError(f"{self.image_id}: no annotations")
        stack = np.stack([self.maps[a] for a in self.annotators])
        if stack.min() < 0 or stack.max() >= self.n_classes:
            raise ValueError(f"{self.image_id}: class outside 0..{self.n_classes - 1}")
        counts = np.zeros(stack.shape[1:] + (self.n_classes,), dtype=np.int32)
        for c in range(self.n_classes):
            counts[..., c] = (stack == c).sum(axis=0)
        return counts


def argmax_high_tie(values: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the highest index."""
    k = values.shape[-1]
    return (k - 1 - np.argmax(values[..., ::-1], axis=-1)).astype(np.uint8)


def majority_vote(aset: AnnotationSet) -> np.ndarray:
    return argmax_high_tie(aset.vote_counts())


def prob_encode(aset: AnnotationSet) -> np.ndarray:
    counts = aset.vote_counts()
    return counts / float(len(aset.maps))


def one_hot(grades: np.ndarray, n_classes: int) -> np.ndarray:
    grades = np.asarray(grades)
    if grades.size and (grades.min() < 0 or grades.max() >= n_classes):
        raise ValueError(f"class value {int(grades.max())} >= n_classes={n_classes}")
    return np.eye(n_classes, dtype=np.float32)[grades]


def prepare_annotations(
    image_id: str,
    raw_maps: dict[str, np.ndarray],
    tissue: np.ndarray | None,
    task: str = "gleason",
) -> AnnotationSet:
    """Merge grades (gleason only), then gate with the tissue mask."""
    maps = {}
    for annotator, m in raw_maps.items():
        m = np.asarray(m)
        if task == "gleason":
            m = merge_low_grades(m)
        else:
            check_class_space(m, "digestpath_binary")
            m = m.astype(np.uint8)
        if tissue is not None:
            m = apply_tissue_gate(m, tissue)
        maps[annotator] = m
    return AnnotationSet(image_id, maps, tissue, n_classes=4 if task == "gleason" else 2)


def read_grade_map(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.uint8)


def write_grade_map(path: str | Path, grades: np.ndarray, legend: dict | None = None) -> None:
    path = Path(path)
    Image.fromarray(np.asarray(grades, dtype=np.uint8), mode="L").save(path)
    if legend is not None:
        path.with_suffix(".legend.json").write_text(
            json.dumps({str(k): v for k, v in legend.items()}, indent=2) + "\n"
        )
