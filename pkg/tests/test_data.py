import hashlib

import numpy as np
import pytest

from chbc.data import (
    Dataset,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    save_dataset,
    train_test_split,
    validate_labels,
)
from chbc.errors import ConfigError, DataError
from chbc.hierarchy import balanced


def digest(ds):
    return hashlib.sha256(ds.inputs.tobytes() + ds.labels.tobytes()).hexdigest()


def perceptron_accuracy(train, test, level, epochs=20):
    """Multiclass perceptron on one label level; returns held-out accuracy."""
    x = np.hstack([train.inputs, np.ones((len(train), 1))])
    xt = np.hstack([test.inputs, np.ones((len(test), 1))])
    y, yt = train.labels[:, level - 1], test.labels[:, level - 1]
    w = np.zeros((train.hierarchy.size(level), x.shape[1]))
    rng = np.random.default_rng(0)
    for _ in range(epochs):
        for n in rng.permutation(len(x)):
            guess = int(np.argmax(w @ x[n]))
            if guess != y[n]:
                w[y[n]] += x[n]
                w[guess] -= x[n]
    return float(np.mean(np.argmax(xt @ w.T, axis=1) == yt))


class TestSynthetic:
    def test_sample_count_and_labels(self):
        ds, th = generate_synthetic(SynthSpec(balanced=[2, 2], samples_per_leaf=4))
        assert len(ds) == 16
        assert ds.inputs.shape == (16, 16)
        assert th.level_sizes == (2, 4)
        validate_labels(ds.labels, th)
        assert np.bincount(ds.labels[:, 1]).tolist() == [4, 4, 4, 4]

    def test_deterministic(self):
        spec = SynthSpec(balanced=[3, 2], seed=7)
        assert digest(generate_synthetic(spec)[0]) == digest(generate_synthetic(spec)[0])
        assert digest(generate_synthetic(SynthSpec(balanced=[3, 2], seed=8))[0]) != digest(generate_synthetic(spec)[0])

    def test_tight_clusters_are_separable_by_nearest_neighbour(self):
        ds, _ = generate_synthetic(SynthSpec(balanced=[3, 3], sigma_within=1e-6, samples_per_leaf=5))
        train, test = train_test_split(ds, 0.4, seed=0)
        dist = ((test.inputs[:, None, :] - train.inputs[None, :, :]) ** 2).sum(-1)
        nearest = train.labels[np.argmin(dist, axis=1)]
        assert np.array_equal(nearest, test.labels)

    def test_linear_probe_on_coarse_level(self):
        ds, _ = generate_synthetic(SynthSpec(balanced=[4, 4], samples_per_leaf=30))
        train, test = train_test_split(ds, 0.25, seed=1)
        assert perceptron_accuracy(train, test, level=1) > 0.95

    def test_image_mode(self):
        spec = SynthSpec(balanced=[2, 2], input_mode="image", image_shape=[2, 8, 8], feature_dim=6, samples_per_leaf=3)
        ds, _ = generate_synthetic(spec)
        assert ds.inputs.shape == (12, 2, 8, 8)
        assert ds.inputs.dtype == np.float32

    def test_explicit_hierarchy(self):
        tree = {"level_sizes": [2, 3], "parents": [[0, 0, 1]]}
        ds, th = generate_synthetic(SynthSpec(hierarchy=tree, samples_per_leaf=2))
        assert th.level_sizes == (2, 3) and len(ds) == 6

    @pytest.mark.parametrize("bad", [
        {"balanced": [2, 2], "sigma_within": 0.0},
        {"balanced": [2, 2], "input_mode": "audio"},
        {"balanced": [2, 2], "samples_per_leaf": 0},
        {},
    ])
    def test_bad_specs(self, bad):
        with pytest.raises(ConfigError):
            SynthSpec(**bad)

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            SynthSpec.from_dict({"balanced": [2, 2], "colour": "red"})


class TestSplit:
    def test_sizes_and_disjoint(self):
        ds, _ = generate_synthetic(SynthSpec(balanced=[2, 5], samples_per_leaf=10))
        train, test = train_test_split(ds, 0.2, seed=3)
        assert len(train) == 80 and len(test) == 20
        rows = {r.tobytes() for r in train.inputs}
        assert not any(r.tobytes() in rows for r in test.inputs)


class TestValidation:
    def test_out_of_range(self, tiny_tree):
        with pytest.raises(DataError, match="label out of range, sample 0, level 2"):
            validate_labels(np.array([[0, 7], [0, 0]]), tiny_tree)

    def test_inconsistent_path(self, tiny_tree):
        with pytest.raises(DataError, match="inconsistent label path, sample 1, level 2"):
            validate_labels(np.array([[0, 0], [0, 2]]), tiny_tree)

    def test_wrong_width(self, tiny_tree):
        with pytest.raises(DataError):
            validate_labels(np.array([[0], [1]]), tiny_tree)

    def test_length_mismatch(self, tiny_tree):
        with pytest.raises(DataError):
            Dataset(np.zeros((3, 2)), np.zeros((2, 2)), tiny_tree)


class TestStorage:
    def test_round_trip_is_bitwise(self, tmp_path):
        ds, _ = generate_synthetic(SynthSpec(balanced=[2, 3], samples_per_leaf=3))
        save_dataset(ds, tmp_path / "a")
        back = load_dataset(tmp_path / "a")
        assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.labels, ds.labels)
        assert back.hierarchy == ds.hierarchy
        save_dataset(back, tmp_path / "b")
        for name in ("data.f32", "labels.u32", "meta.json", "hierarchy.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_file_sizes(self, tmp_path):
        ds, _ = generate_synthetic(SynthSpec(balanced=[2, 2], samples_per_leaf=2, feature_dim=5))
        save_dataset(ds, tmp_path)
        assert (tmp_path / "data.f32").stat().st_size == 8 * 5 * 4
        assert (tmp_path / "labels.u32").stat().st_size == 8 * 2 * 4

    def test_truncated_data(self, tmp_path):
        ds, _ = generate_synthetic(SynthSpec(balanced=[2, 2], samples_per_leaf=2, feature_dim=5))
        save_dataset(ds, tmp_path)
        blob = (tmp_path / "data.f32").read_bytes()
        (tmp_path / "data.f32").write_bytes(blob[:-8])
        with pytest.raises(DataError, match="expected 160 bytes, found 152"):
            load_dataset(tmp_path)

    def test_corrupt_label_detected_on_load(self, tmp_path):
        ds = Dataset(np.zeros((2, 3)), np.array([[0, 0], [1, 2]]), balanced(2, 2))
        save_dataset(ds, tmp_path)
        labels = np.frombuffer((tmp_path / "labels.u32").read_bytes(), dtype="<u4").copy()
        labels[1] = 9
        (tmp_path / "labels.u32").write_bytes(labels.tobytes())
        with pytest.raises(DataError, match="label out of range, sample 0, level 2"):
            load_dataset(tmp_path)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "absent")
