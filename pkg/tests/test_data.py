import csv

import numpy as np
import pytest
from PIL import Image

from memmc_mae.config import SyntheticSpec
from memmc_mae.data import (
    DatasetError,
    LabeledTestSet,
    generate_synthetic,
    load_folder_dataset,
    texture_family,
    write_dataset,
)
from memmc_mae.evaluation import evaluate_scores
from memmc_mae.metrics import MetricError


def _png(path, value, size=(20, 20), mode="L"):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.full(size[::-1] + ((3,) if mode == "RGB" else ()), value, np.uint8)
    Image.fromarray(arr).save(path)


def _manifest(root, rows, header=("split", "path", "label", "mask_path")):
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def test_manifest_three_normal_two_anomalous(tmp_path):
    rows = []
    for i in range(3):
        _png(tmp_path / f"train/n{i}.png", 40 * i)
        rows.append(("train", f"train/n{i}.png", "normal", ""))
    for i in range(2):
        _png(tmp_path / f"test/a{i}.png", 200)
        m = np.zeros((20, 20), np.uint8)
        m[5:10, 5:10] = 255
        (tmp_path / "masks").mkdir(exist_ok=True)
        Image.fromarray(m).save(tmp_path / f"masks/a{i}.png")
        rows.append(("test", f"test/a{i}.png", "anomalous", f"masks/a{i}.png"))
    _manifest(tmp_path, rows)
    normal, test = load_folder_dataset(tmp_path, "manifest.csv", image_size=16, channels=1)
    assert len(normal) == 3 and len(test) == 2
    assert normal.images.shape == (3, 16, 16, 1)
    assert normal.images.min() >= 0 and normal.images.max() <= 1
    assert all(set(np.unique(m)) <= {0, 1} for m in test.masks)
    assert test.anomalous_with_masks() == [0, 1]
    np.testing.assert_allclose(normal.images[1], 40 / 255, atol=1e-6)


def test_mask_on_normal_entry_is_rejected(tmp_path):
    _png(tmp_path / "test/x.png", 10)
    _png(tmp_path / "m.png", 255)
    _manifest(tmp_path, [("test", "test/x.png", "normal", "m.png")])
    with pytest.raises(DatasetError, match="mask"):
        load_folder_dataset(tmp_path, "manifest.csv", image_size=16, channels=1)


def test_missing_file_and_size_mismatch(tmp_path):
    _manifest(tmp_path, [("test", "test/nope.png", "normal", "")])
    with pytest.raises(DatasetError):
        load_folder_dataset(tmp_path, "manifest.csv", 16, 1)
    _png(tmp_path / "test/a.png", 10, size=(20, 20))
    _png(tmp_path / "m.png", 255, size=(10, 20))
    _manifest(tmp_path, [("test", "test/a.png", "anomalous", "m.png")])
    with pytest.raises(DatasetError):
        load_folder_dataset(tmp_path, "manifest.csv", 16, 1)
    (tmp_path / "test/broken.png").write_bytes(b"not a png")
    _manifest(tmp_path, [("test", "test/broken.png", "normal", "")])
    with pytest.raises(DatasetError):
        load_folder_dataset(tmp_path, "manifest.csv", 16, 1)


def test_directories_as_labels(tmp_path):
    _png(tmp_path / "train/normal/a.png", 10, mode="RGB")
    _png(tmp_path / "test/normal/b.jpg", 10, mode="RGB")
    _png(tmp_path / "test/anomalous/c.png", 10, mode="RGB")
    _png(tmp_path / "test/masks/c.png", 255)
    normal, test = load_folder_dataset(tmp_path, None, image_size=8, channels=3)
    assert len(normal) == 1 and test.labels == ["normal", "anomalous"]
    assert test.masks[0] is None and test.masks[1].all()
    assert test.images.shape == (2, 8, 8, 3)


def test_full_scale_manifest_counts_round_trip(tmp_path):
    # 1600 normal training images; 500 normal and 1000 masked anomalous test images
    _png(tmp_path / "img.png", 100, size=(4, 4))
    _png(tmp_path / "mask.png", 255, size=(4, 4))
    rows = [("train", "img.png", "normal", "")] * 1600
    rows += [("test", "img.png", "normal", "")] * 500
    rows += [("test", "img.png", "anomalous", "mask.png")] * 1000
    _manifest(tmp_path, rows)
    normal, test = load_folder_dataset(tmp_path, "manifest.csv", image_size=4, channels=1)
    assert len(normal) == 1600
    assert test.labels.count("normal") == 500
    assert len(test.anomalous_with_masks()) == 1000


def test_labeled_set_invariants():
    imgs = np.zeros((2, 4, 4, 1), np.float32)
    with pytest.raises(DatasetError):
        LabeledTestSet(imgs, ["normal", "anomalous"], [np.ones((4, 4), np.uint8), None], ["a", "b"])
    with pytest.raises(DatasetError):
        LabeledTestSet(imgs, ["normal", "anomalous"], [None, np.full((4, 4), 2, np.uint8)], ["a", "b"])
    with pytest.raises(DatasetError):
        LabeledTestSet(imgs, ["normal", "anomalous"], [None, np.ones((3, 4), np.uint8)], ["a", "b"])


def test_synthetic_sizes_and_masks():
    spec = SyntheticSpec(n_train=100, n_test_normal=50, n_test_anomalous=50, seed=3)
    normal, test = generate_synthetic(spec)
    assert normal.images.shape == (100, 64, 64, 1)
    assert test.labels.count("normal") == 50 and test.labels.count("anomalous") == 50
    for label, mask in zip(test.labels, test.masks):
        assert (mask is None) == (label == "normal")
        if mask is not None:
            assert mask.sum() > 0 and mask.dtype == np.uint8
    assert normal.images.min() >= 0 and normal.images.max() <= 1


def test_synthetic_is_deterministic_and_seed_sensitive():
    spec = SyntheticSpec(n_train=5, n_test_normal=3, n_test_anomalous=3, seed=11)
    a, ta = generate_synthetic(spec)
    b, tb = generate_synthetic(spec)
    assert a.images.tobytes() == b.images.tobytes()
    assert ta.images.tobytes() == tb.images.tobytes()
    assert all((x is None and y is None) or (x == y).all() for x, y in zip(ta.masks, tb.masks))
    c, _ = generate_synthetic(SyntheticSpec(n_train=5, n_test_normal=3, n_test_anomalous=3, seed=12))
    assert a.images.tobytes() != c.images.tobytes()


@pytest.mark.parametrize("family", ["blob", "square", "intensity"])
def test_anomaly_masks_nonempty_and_background_in_texture_band(family):
    spec = SyntheticSpec(n_train=0, n_test_normal=0, n_test_anomalous=4, anomaly=family,
                         noise_amplitude=0.0, seed=2)
    _, test = generate_synthetic(spec)
    for img, mask in zip(test.images, test.masks):
        assert mask.any()
        # noise-free gratings span 0.5 +- 0.3; only masked pixels may leave that band
        assert img[mask == 0].min() >= 0.2 - 1e-6 and img[mask == 0].max() <= 0.8 + 1e-6


def test_texture_family_shared_by_the_dataset():
    spec = SyntheticSpec(seed=5)
    assert texture_family(spec) == texture_family(SyntheticSpec(seed=5, n_train=3))
    assert texture_family(spec) != texture_family(SyntheticSpec(seed=6))


def test_anomaly_too_large_and_unknown_family():
    with pytest.raises(ValueError):
        SyntheticSpec(image_size=16, anomaly_size=(4, 8))
    with pytest.raises(ValueError):
        SyntheticSpec(anomaly="scratch")


def test_anomaly_free_variant_refuses_auc():
    _, test = generate_synthetic(SyntheticSpec(n_train=2, n_test_normal=4, n_test_anomalous=0))
    assert test.anomalous_with_masks() == []
    with pytest.raises(MetricError, match="both classes"):
        evaluate_scores(test.ids, test.labels, np.zeros(len(test)))


def test_write_dataset_round_trips_through_loader(tmp_path):
    spec = SyntheticSpec(n_train=4, n_test_normal=2, n_test_anomalous=2, seed=1)
    normal, test = generate_synthetic(spec)
    write_dataset(tmp_path, normal, test, meta={"seed": 1})
    n2, t2 = load_folder_dataset(tmp_path, "manifest.csv", image_size=64, channels=1)
    assert len(n2) == 4 and t2.labels == test.labels
    np.testing.assert_allclose(n2.images, normal.images, atol=0.5 / 255 + 1e-6)
    for a, b in zip(test.masks, t2.masks):
        assert (a is None and b is None) or (a == b).all()
