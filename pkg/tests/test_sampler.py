import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from histodense.preprocess import TissueMaskParams, write_mask
from histodense.sampler import (
    COMPOSE,
    MAJORITY,
    Patch,
    Provenance,
    SamplingError,
    augment,
    batch_rng,
    batch_stream,
    build_index,
    crop,
    orient,
    parse_label_source,
    sample_batch,
    sample_batch_digestpath,
    sample_batch_gleason,
)


def _patch(arr, target=None):
    target = arr[..., :1] if target is None else target
    return Patch(arr, target, Provenance("x", (0, 0), 0))


# ---------------------------------------------------------------- augmentation


def test_orientation_zero_is_identity():
    a = np.random.default_rng(0).random((5, 5, 2))
    np.testing.assert_array_equal(augment(_patch(a), 0).pixels, a)


def test_rotation_order_four():
    a = np.random.default_rng(0).random((5, 5, 2))
    p = _patch(a)
    for _ in range(4):
        p = augment(p, 1)
    np.testing.assert_array_equal(p.pixels, a)
    assert p.provenance.orientation_id == 0


def test_group_closure_and_table():
    probe = np.arange(16).reshape(4, 4)
    images = [orient(probe, k) for k in range(8)]
    assert len({im.tobytes() for im in images}) == 8
    for a, b in itertools.product(range(8), repeat=2):
        out = orient(orient(probe, a), b)
        assert any(np.array_equal(out, im) for im in images)
        np.testing.assert_array_equal(out, images[COMPOSE[a, b]])
    # every element has an inverse
    for a in range(8):
        assert 0 in COMPOSE[a]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 9).map(lambda s: (s, s))).map(lambda t: (*t[0], 3)),
              elements=st.floats(-5, 5, width=32)), st.integers(0, 7))
def test_augment_is_pixel_permutation(arr, k):
    out = augment(_patch(arr), k)
    np.testing.assert_array_equal(np.sort(out.pixels, axis=None), np.sort(arr, axis=None))
    # pixels and target move together
    np.testing.assert_array_equal(out.pixels[..., :1], out.target)


def test_augment_rejects_non_square():
    with pytest.raises(ValueError, match="square"):
        augment(_patch(np.zeros((3, 4, 1))), 1)
    with pytest.raises(ValueError):
        orient(np.zeros((3, 3)), 8)


def test_crop_reflects():
    a = np.arange(25).reshape(5, 5)
    c = crop(a, (0, 0), 4)
    np.testing.assert_array_equal(c[2:, 2:], a[:2, :2])
    np.testing.assert_array_equal(c[:, 2], [a[2, 0], a[1, 0], a[0, 0], a[1, 0]])
    assert crop(a, (4, 4), 7).shape == (7, 7)


# ---------------------------------------------------------------- index


def _tiny_dataset(root, labels, masks=True):
    (root / "images").mkdir(parents=True)
    (root / "labels" / "p1").mkdir(parents=True)
    if masks:
        (root / "masks").mkdir()
    for name, lab in labels.items():
        img = np.full(lab.shape + (3,), 200, np.uint8)
        Image.fromarray(img).save(root / "images" / f"{name}.png")
        Image.fromarray((lab * 255).astype(np.uint8)).save(root / "labels" / "p1" / f"{name}.png")
        if masks:
            write_mask(root / "masks" / f"{name}.png", np.ones(lab.shape, bool))
    return root


def test_single_pixel_center(tmp_path):
    lab = np.zeros((24, 24), np.uint8)
    lab[10, 10] = 1
    idx = build_index(_tiny_dataset(tmp_path, {"a": lab, "b": np.zeros((24, 24), np.uint8)}), "digestpath")
    a, b = idx.by_id["a"], idx.by_id["b"]
    assert a.centers["label"][1].tolist() == [[10, 10]]
    assert a.kind == "positive" and b.kind == "negative"
    assert len(b.centers["label"][1]) == 0
    assert len(b.centers["label"][0]) == 24 * 24


def test_size_mismatch_is_excluded(tmp_path):
    root = _tiny_dataset(tmp_path, {"a": np.zeros((8, 8), np.uint8)}, masks=False)
    Image.fromarray(np.zeros((9, 8), np.uint8)).save(root / "labels" / "p1" / "a.png")
    idx = build_index(root, "digestpath", tissue=TissueMaskParams(radius=0, min_hole_area=0))
    assert idx.entries == []
    assert "size mismatch" in idx.warnings[0]


def test_centers_bear_their_class(gleason_index):
    for e in gleason_index.entries:
        aset = gleason_index.annotations(e)
        mask = gleason_index.tissue_mask(e)
        from histodense.labels import majority_vote

        maps = dict(aset.maps)
        maps[MAJORITY] = majority_vote(aset)
        for src, per in e.centers.items():
            for cls, pts in per.items():
                if len(pts):
                    assert (maps[src][pts[:, 0], pts[:, 1]] == cls).all()
                    if cls == 0:
                        assert mask[pts[:, 0], pts[:, 1]].all()


def test_index_save_is_byte_identical(tmp_path, small_digestpath_root):
    params = TissueMaskParams(radius=2, min_hole_area=64)
    a = build_index(small_digestpath_root, "digestpath", tissue=params, out_path=tmp_path / "a.json")
    b = build_index(small_digestpath_root, "digestpath", tissue=params, out_path=tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.json.centers.npy").read_bytes() == (tmp_path / "b.json.centers.npy").read_bytes()
    assert a.digest() == b.digest()


def test_index_load_round_trip(tmp_path, small_digestpath_index):
    small_digestpath_index.save(tmp_path / "i.json")
    again = type(small_digestpath_index).load(tmp_path / "i.json", root=small_digestpath_index.root)
    assert again.digest() == small_digestpath_index.digest()
    for e1, e2 in zip(again.entries, small_digestpath_index.entries):
        assert (e1.image_id, e1.kind, e1.size) == (e2.image_id, e2.kind, e2.size)


def test_center_stride_subsamples(small_digestpath_root):
    params = TissueMaskParams(radius=2, min_hole_area=64)
    full = build_index(small_digestpath_root, "digestpath", tissue=params)
    sparse = build_index(small_digestpath_root, "digestpath", center_stride=4, tissue=params)
    for a, b in zip(full.entries, sparse.entries):
        for cls in (0, 1):
            fa = {tuple(p) for p in a.centers["label"][cls]}
            sb = {tuple(p) for p in b.centers["label"][cls]}
            assert sb <= fa
            assert bool(fa) == bool(sb)


# ---------------------------------------------------------------- batches


def test_digestpath_composition(small_digestpath_index):
    idx = small_digestpath_index
    for step in range(200):
        batch = sample_batch_digestpath(idx, batch_rng(0, step), 16)
        roles = Counter(p.provenance.role for p in batch.patches)
        assert roles == {"cancer": 2, "benign_positive": 1, "negative": 1}
        assert len(set(batch.image_ids)) == 4
        for p in batch.patches:
            e = idx.by_id[p.provenance.image_id]
            r, c = p.provenance.center
            assert e.kind == ("negative" if p.provenance.role == "negative" else "positive")
            label = next(iter(idx.annotations(e).maps.values()), np.zeros(e.size))
            assert label[r, c] == p.provenance.center_class
            if p.provenance.center_class == 0:
                assert idx.tissue_mask(e)[r, c]
            assert p.pixels.shape == (16, 16, 6) and p.target.shape == (16, 16, 2)


def test_digestpath_shuffled(small_digestpath_index):
    first_roles = {sample_batch_digestpath(small_digestpath_index, batch_rng(1, s), 8).patches[0].provenance.role
                   for s in range(60)}
    assert first_roles == {"cancer", "benign_positive", "negative"}


def test_digestpath_insufficient_images(small_digestpath_index):
    idx = small_digestpath_index
    two_pos = idx.subset([e.image_id for e in idx.entries if e.kind == "negative"]
                         + [e.image_id for e in idx.entries if e.kind == "positive"][:2])
    with pytest.raises(SamplingError, match="2 positive with cancer"):
        sample_batch_digestpath(two_pos, batch_rng(0, 0), 8)
    no_neg = idx.subset([e.image_id for e in idx.entries if e.kind == "positive"])
    with pytest.raises(SamplingError, match="0 negative"):
        sample_batch_digestpath(no_neg, batch_rng(0, 0), 8)


@pytest.mark.parametrize("source", ["majority_vote", "all_annotators", "probabilistic", "single_annotator:p1"])
def test_gleason_composition(gleason_index, source):
    for step in range(60):
        batch = sample_batch_gleason(gleason_index, batch_rng(2, step), 16, source)
        assert sorted(p.provenance.center_class for p in batch.patches) == [0, 1, 2, 3]
        assert len(set(batch.image_ids)) == 4
        t = batch.targets()
        assert t.shape == (4, 16, 16, 4)
        np.testing.assert_allclose(t.sum(-1), 1, atol=1e-6)
        for p in batch.patches:
            kind, who = parse_label_source(source)
            if kind == "single_annotator":
                assert p.provenance.annotator == who
            elif kind == "all_annotators":
                e = gleason_index.by_id[p.provenance.image_id]
                assert p.provenance.annotator in e.annotators
            else:
                assert p.provenance.annotator is None


def test_all_annotators_choice_is_uniform(gleason_index):
    # the annotator of a patch is drawn among those of its image that have the class
    seen = Counter()
    for step in range(400):
        for p in sample_batch_gleason(gleason_index, batch_rng(3, step), 8, "all_annotators").patches:
            e = gleason_index.by_id[p.provenance.image_id]
            having = tuple(a for a in e.annotators if len(e.centers[a][p.provenance.center_class]))
            seen[(having, p.provenance.annotator)] += 1
    groups = {}
    for (having, a), n in seen.items():
        groups.setdefault(having, {})[a] = n
    for having, counts in groups.items():
        total = sum(counts.values())
        if total >= 150 and len(having) > 1:
            for a in having:
                assert abs(counts.get(a, 0) / total - 1 / len(having)) < 0.12


def test_probabilistic_targets_are_fractional(gleason_index):
    vals = set()
    for step in range(20):
        vals |= set(np.unique(sample_batch_gleason(gleason_index, batch_rng(4, step), 16,
                                                   "probabilistic").targets()).round(6))
    assert any(0 < v < 1 for v in vals)


def test_gleason_missing_class(gleason_index):
    with pytest.raises(SamplingError, match="class"):
        sample_batch_gleason(gleason_index.subset(gleason_index.image_ids[:1]), batch_rng(0, 0), 8)
    with pytest.raises(ValueError, match="label_source"):
        parse_label_source("nonsense")


def test_batch_determinism(gleason_index):
    a = [b.pixels() for b in batch_stream(gleason_index, 5, 0, 8, 16)]
    b = [b.pixels() for b in batch_stream(gleason_index, 5, 0, 8, 16, prefetch=3)]
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
    assert len(a) == len(b) == 8
    # resuming mid-stream reproduces the tail
    tail = [b.pixels() for b in batch_stream(gleason_index, 5, 4, 8, 16)]
    for x, y in zip(a[4:], tail):
        assert x.tobytes() == y.tobytes()


def test_seed_state_recorded(gleason_index):
    batch = sample_batch(gleason_index, batch_rng(9, 0), 8)
    assert batch.seed_state == batch_rng(9, 0).bit_generator.state
