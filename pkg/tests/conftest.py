import numpy as np
import pytest
import torch
from PIL import Image

from histodense.sampler import build_index
from histodense.synthetic import make_blob_dataset, make_gleason_dataset

torch.set_num_threads(1)

_acceptance_results: list[tuple[str, str]] = []


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        _acceptance_results.append((name, "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{outcome}  {name}")


@pytest.fixture(scope="session")
def blob_root(tmp_path_factory):
    return make_blob_dataset(tmp_path_factory.mktemp("blob"), n_images=16, size=256)


@pytest.fixture(scope="session")
def gleason_root(tmp_path_factory):
    return make_gleason_dataset(tmp_path_factory.mktemp("gleason"), n_images=8, size=96)


def _save_rgb(path, arr):
    Image.fromarray(arr.astype(np.uint8)).save(path)


@pytest.fixture(scope="session")
def small_digestpath_root(tmp_path_factory):
    """Five positive and two negative 48x48 images, no tissue-mask files."""
    root = tmp_path_factory.mktemp("dp_small")
    (root / "images").mkdir()
    (root / "labels" / "p1").mkdir(parents=True)
    rng = np.random.default_rng(1)
    for i in range(7):
        img = np.full((48, 48, 3), 245.0)
        img[6:42, 6:42] = (230, 150, 200)
        label = np.zeros((48, 48), np.uint8)
        if i < 5:
            r, c = rng.integers(10, 26, size=2)
            label[r:r + 10, c:c + 10] = 1
            img[label == 1] = (140, 70, 150)
        img += rng.normal(0, 3, img.shape)
        _save_rgb(root / "images" / f"s{i}.png", np.clip(img, 0, 255))
        Image.fromarray(label * 255).save(root / "labels" / "p1" / f"s{i}.png")
    return root


@pytest.fixture(scope="session")
def small_digestpath_index(small_digestpath_root):
    from histodense.preprocess import TissueMaskParams

    return build_index(small_digestpath_root, "digestpath",
                       tissue=TissueMaskParams(radius=2, min_hole_area=64))


@pytest.fixture(scope="session")
def gleason_index(gleason_root):
    from histodense.preprocess import TissueMaskParams

    return build_index(gleason_root, "gleason", tissue=TissueMaskParams(radius=2, min_hole_area=64))
