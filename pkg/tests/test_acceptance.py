"""Acceptance criteria, one test each.  A PASS/FAIL line per criterion is
printed in the terminal summary (see conftest.py)."""

import itertools
import json
import time
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
import torch
import yaml

from histodense.cli import main
from histodense.infer import plan_tiles, predict_image
from histodense.labels import AnnotationSet, majority_vote, prob_encode
from histodense.metrics import accuracy, challenge_score, confusion, dice, evaluate, f1_scores, kappa
from histodense.netgraph import (
    MICRO_CONFIG,
    NetworkConfig,
    ShapeError,
    build_network,
    count_parameters,
    forward,
    gradient_check,
    round_half_up,
)
from histodense.preprocess import TissueMaskParams
from histodense.sampler import (
    COMPOSE,
    Patch,
    Provenance,
    augment,
    batch_rng,
    batch_stream,
    build_index,
    orient,
    sample_batch_digestpath,
    sample_batch_gleason,
)
from histodense.trainer import TrainSchedule, learning_rate, predict_dataset, train, truth_maps


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def test_criterion_01_parameter_counts():
    with Timer() as t:
        one_bn = count_parameters(build_network(NetworkConfig()))
        tiramisu = count_parameters(build_network(NetworkConfig(variant="tiramisu_baseline")))
    print(f"one_bn_denseunet={one_bn} tiramisu_baseline={tiramisu} ({t.seconds:.2f}s)")
    assert abs(one_bn - 294_000) <= 0.15 * 294_000
    assert abs(tiramisu - 329_000) <= 0.15 * 329_000
    assert tiramisu > one_bn
    assert t.seconds < 10


def test_criterion_02_compression_law():
    net = build_network(NetworkConfig())
    deepest = net.dense_blocks[4]
    assert deepest.name == "enc5" and deepest.n_conv_blocks == 15
    out = net.channels[deepest.transition]
    assert out == round_half_up(Fraction(1, 2) * 6 * 15) == 45
    ratio = net.channels[deepest.concat_names[-1]] / out
    assert 2.7 <= ratio <= 3.3


def test_criterion_03_shape_suite():
    with Timer() as t:
        rng = np.random.default_rng(0)
        for head, k in (("binary_2class", 2), ("multiclass_4", 4)):
            net = build_network(NetworkConfig(growth_rate=2, head=head))
            for side in (256, 512, 768):
                y = forward(net, rng.random((1, side, side, 6), dtype=np.float32))
                assert y.shape == (1, side, side, k)
                np.testing.assert_allclose(y.sum(-1), 1, atol=1e-5)
            for bad in (100, 264):
                with pytest.raises(ShapeError, match="not divisible"):
                    forward(net, np.zeros((1, bad, bad, 6), np.float32))
    assert t.seconds < 60


def test_criterion_04_gradient_check():
    with Timer() as t:
        err = gradient_check(MICRO_CONFIG, probe_count=50, step=1e-5)
    print(f"max relative error {err:.3e} ({t.seconds:.1f}s)")
    assert err <= 1e-4
    assert t.seconds < 60


def _tally_oracle(pred, truth, k):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(truth.ravel().tolist(), pred.ravel().tolist()):
        cm[t][p] += 1
    n = sum(map(sum, cm))
    tp = [cm[c][c] for c in range(k)]
    fp = [sum(cm[r][c] for r in range(k)) - tp[c] for c in range(k)]
    fn = [sum(cm[c]) - tp[c] for c in range(k)]
    f1 = [2 * tp[c] / (2 * tp[c] + fp[c] + fn[c]) if 2 * tp[c] + fp[c] + fn[c] else 0.0 for c in range(k)]
    present = [c for c in range(k) if tp[c] + fn[c] > 0]
    micro = 2 * sum(tp) / (2 * sum(tp) + sum(fp) + sum(fn))
    macro = sum(f1[c] for c in present) / len(present)
    p_o = sum(tp) / n
    p_e = sum((tp[c] + fn[c]) * (tp[c] + fp[c]) for c in range(k)) / n**2
    kap = (1.0 if p_o == 1 else 0.0) if p_e == 1 else (p_o - p_e) / (1 - p_e)
    out = {"cm": cm, "accuracy": p_o, "micro": micro, "macro": macro, "kappa": kap,
           "score": kap + (macro + micro) / 2}
    if k == 2:
        out["dice"] = 100.0 if 2 * tp[1] + fp[1] + fn[1] == 0 else 200.0 * tp[1] / (2 * tp[1] + fp[1] + fn[1])
    return out


def test_criterion_05_metric_oracle_equivalence():
    rng = np.random.default_rng(5)
    worst = 0.0
    with Timer() as t:
        for k in (2, 4):
            for _ in range(1000):
                truth = rng.choice(k, (64, 64), p=rng.dirichlet(np.ones(k)))
                noise = rng.random((64, 64)) < rng.random()
                pred = np.where(noise, rng.integers(0, k, (64, 64)), truth)
                o = _tally_oracle(pred, truth, k)
                cm = confusion(pred, truth, k)
                assert cm.tolist() == o["cm"]
                micro, macro = f1_scores(cm)
                got = {"accuracy": accuracy(cm), "micro": micro, "macro": macro,
                       "kappa": kappa(cm), "score": challenge_score(cm)}
                if k == 2:
                    got["dice"] = dice(cm)
                for key, v in got.items():
                    worst = max(worst, abs(v - o[key]))
    print(f"max deviation {worst:.2e} ({t.seconds:.1f}s)")
    assert worst <= 1e-9
    assert t.seconds < 60


def test_criterion_06_fusion_exhaustive():
    n_sets = 0
    for n in range(1, 7):
        for votes in itertools.combinations_with_replacement(range(4), n):
            aset = AnnotationSet("x", {f"a{i}": np.array([[v]], np.uint8) for i, v in enumerate(votes)})
            tally = Counter(votes)
            top = max(tally.values())
            assert majority_vote(aset)[0, 0] == max(c for c, m in tally.items() if m == top)
            n_sets += 1
    assert n_sets == 209
    worked = AnnotationSet("p", {f"a{i}": np.array([[v]], np.uint8) for i, v in enumerate((0, 1, 1, 2, 2, 2))})
    np.testing.assert_allclose(prob_encode(worked)[0, 0], [0.1667, 0.3333, 0.5, 0.0], atol=1e-3)


def test_criterion_07_sampler_hard_constraints(small_digestpath_index, gleason_index):
    violations = 0
    with Timer() as t:
        for step in range(10_000):
            b = sample_batch_digestpath(small_digestpath_index, batch_rng(7, step), 32)
            roles = Counter(p.provenance.role for p in b.patches)
            classes = sorted(p.provenance.center_class for p in b.patches)
            if roles != {"cancer": 2, "benign_positive": 1, "negative": 1} or classes != [0, 0, 1, 1] \
                    or len(set(b.image_ids)) != 4:
                violations += 1
        for step in range(10_000):
            b = sample_batch_gleason(gleason_index, batch_rng(7, step), 32, "all_annotators")
            if sorted(p.provenance.center_class for p in b.patches) != [0, 1, 2, 3] \
                    or len(set(b.image_ids)) != 4:
                violations += 1
    print(f"violations {violations} ({t.seconds:.1f}s)")
    assert violations == 0
    assert t.seconds < 300


def test_criterion_08_augmentation_group():
    probe = np.arange(36).reshape(6, 6)
    elems = [orient(probe, k) for k in range(8)]
    for a, b in itertools.product(range(8), repeat=2):
        composed = orient(orient(probe, a), b)
        assert any(np.array_equal(composed, e) for e in elems)
        assert np.array_equal(composed, elems[COMPOSE[a, b]])
    np.testing.assert_array_equal(orient(probe, 0), probe)
    r = probe
    for _ in range(4):
        r = orient(r, 1)
    np.testing.assert_array_equal(r, probe)
    rng = np.random.default_rng(8)
    for k in range(8):
        px = rng.random((16, 16, 6))
        out = augment(Patch(px, px[..., :2], Provenance("x", (0, 0), 0)), k)
        np.testing.assert_array_equal(np.sort(out.pixels, axis=None), np.sort(px, axis=None))
        np.testing.assert_array_equal(np.sort(out.target, axis=None), np.sort(px[..., :2], axis=None))


def test_criterion_09_schedule():
    assert learning_rate(0) == 0.001
    assert learning_rate(1) == 0.00099
    independent = float(Fraction(1, 1000) * Fraction(99, 100) ** 100)
    assert abs(learning_rate(100) - independent) <= 1e-12


@pytest.mark.slow
def test_criterion_10_overfit_smoke(blob_root):
    with Timer() as t:
        idx = build_index(blob_root, "digestpath", center_stride=4)
        cfg = NetworkConfig(growth_rate=6, encoder_blocks=(2, 3, 4), patch_side=128)
        res = train(cfg, idx, None, schedule=TrainSchedule(iterations_per_epoch=4, epochs=200), seed=0)
        net = res.checkpoint.restore_network()
        rep = evaluate(predict_dataset(net, idx, idx.image_ids), truth_maps(idx, idx.image_ids), "digestpath")
    print(f"training-set DICE {rep.aggregate['dice']:.2f}% after {res.checkpoint.epoch} epochs "
          f"({t.seconds:.0f}s)")
    assert len(idx.entries) == 16
    assert res.checkpoint.epoch == 200
    assert rep.aggregate["dice"] >= 95.0
    assert t.seconds <= 1800


def test_criterion_11_stitching():
    rng = np.random.default_rng(11)
    img = rng.random((70, 90, 6))

    def const(x):
        out = torch.empty(x.shape[0], 2, *x.shape[2:], dtype=torch.float64)
        out[:, 0], out[:, 1] = 0.3, 0.7
        return out

    for overlap in (0, 1, 5, 8, 15):
        for window in ("cosine", "uniform"):
            out = predict_image(const, img, plan_tiles(img.shape[:2], 16, overlap), window)
            assert np.abs(out.probs - [0.3, 0.7]).max() <= 1e-12

    plan = plan_tiles((16, 24), 16, 8)
    assert plan.origins == ((0, 0), (0, 8))
    values = iter([0.0, 1.0])

    def zero_one(x):
        v = next(values)
        out = torch.empty(x.shape[0], 2, *x.shape[2:], dtype=torch.float64)
        out[:, 0], out[:, 1] = v, 1 - v
        return out

    out = predict_image(zero_one, np.zeros((16, 24, 6)), plan, "uniform")
    assert np.abs(out.probs[:, 8:16, 0] - 0.5).max() <= 1e-12

    net = build_network(MICRO_CONFIG, seed=1).double()
    plan = plan_tiles((48, 64), 16, 0)
    img = rng.random((48, 64, 6))
    stitched = predict_image(net, img, plan).probs
    net.eval()
    direct = np.empty((48, 64, 4))
    with torch.no_grad():
        for r, c in plan.origins:
            x = torch.as_tensor(img[r:r + 16, c:c + 16]).permute(2, 0, 1)[None]
            direct[r:r + 16, c:c + 16] = net(x)[0].permute(1, 2, 0).numpy()
    np.testing.assert_array_equal(stitched, direct)


def _cli_run(tmp_path, dataset, name):
    out = tmp_path / name
    cfg = tmp_path / f"{name}.yaml"
    cfg.write_text(yaml.safe_dump({
        "task": "digestpath", "dataset_root": str(dataset), "output_dir": str(out), "seed": 12,
        "folds": 7, "network": {"growth_rate": 2, "encoder_blocks": [1, 1], "patch_side": 16},
        "schedule": {"iterations_per_epoch": 5, "epochs": 2},
        "tissue": {"radius": 2, "min_hole_area": 64}, "inference": {"overlap": 4},
    }))
    for cmd in (["index"], ["folds"], ["train", "--fold", "0"], ["predict", "--fold", "0"],
                ["evaluate", "--fold", "0"]):
        assert main([cmd[0], "--config", str(cfg), *cmd[1:]]) == 0
    main(["report", "--config", str(cfg)])  # partial (one fold) by design
    return out


def test_criterion_12_determinism(tmp_path, small_digestpath_root):
    a = _cli_run(tmp_path, small_digestpath_root, "a")
    b = _cli_run(tmp_path, small_digestpath_root, "b")
    same = ["config/index.json", "config/index.json.centers.npy", "config/folds.json",
            "config/config_hash.txt", "reports/fold_0.json", "reports/fold_0.csv", "reports/fold_0.txt",
            "reports/summary.csv", "reports/summary.txt"]
    for rel in same:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    for p in sorted((a / "predictions" / "fold_0").iterdir()):
        assert p.read_bytes() == (b / "predictions" / "fold_0" / p.name).read_bytes(), p.name
    log_a = [json.loads(x) for x in (a / "logs" / "train_fold_0.jsonl").read_text().splitlines()]
    log_b = [json.loads(x) for x in (b / "logs" / "train_fold_0.jsonl").read_text().splitlines()]
    assert [r["train_loss"] for r in log_a] == [r["train_loss"] for r in log_b]

    idx = build_index(small_digestpath_root, "digestpath", tissue=TissueMaskParams(radius=2, min_hole_area=64))
    seqs = [[bt.pixels().tobytes() + bt.targets().tobytes() for bt in batch_stream(idx, 3, 0, 20, 16, prefetch=p)]
            for p in (0, 4)]
    assert seqs[0] == seqs[1]

    cfg = NetworkConfig(growth_rate=2, encoder_blocks=(1, 1), patch_side=16)

    def trajectory():
        snaps = []
        train(cfg, idx, None, schedule=TrainSchedule(iterations_per_epoch=10, epochs=1), seed=3,
              on_step=lambda s, net: snaps.append(torch.cat([p.detach().flatten().clone()
                                                              for p in net.parameters()])))
        return snaps

    t1, t2 = trajectory(), trajectory()
    assert len(t1) == 10
    assert all(torch.equal(x, y) for x, y in zip(t1, t2))
    assert not torch.equal(t1[0], t1[-1])
