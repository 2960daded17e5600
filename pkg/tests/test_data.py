import json

import numpy as np
import pytest

from robustlab import data


def small_alphabet(seed=0, train=2, test=1, size=32):
    return data.gen_alphabet(seed, train_per_class=train, test_per_class=test,
                             image_size=size)


def test_alphabet_default_counts_per_paper():
    # full-size generation: 1,000 train and 200 test images per letter class
    train, test = data.gen_alphabet(0)
    assert len(train) == 26_000
    assert len(test) == 5_200


def test_alphabet_one_per_class():
    train, _ = small_alphabet(train=1)
    assert len(train) == 26
    assert sorted(train.labels.tolist()) == list(range(26))


def test_alphabet_deterministic_bitwise():
    t1, s1 = small_alphabet(seed=5)
    t2, s2 = small_alphabet(seed=5)
    assert np.array_equal(t1.images, t2.images)
    assert np.array_equal(s1.images, s2.images)


def test_alphabet_rejects_tiny_images():
    with pytest.raises(ValueError, match="too small"):
        data.gen_alphabet(0, train_per_class=1, test_per_class=1,
                          image_size=12)


def test_alphabet_pixels_in_unit_interval():
    train, _ = small_alphabet()
    assert train.images.min() >= 0.0
    assert train.images.max() <= 1.0


def test_class_balance_exact():
    train, test = small_alphabet(train=3, test=2)
    assert all((train.labels == c).sum() == 3 for c in range(26))
    assert all((test.labels == c).sum() == 2 for c in range(26))


def test_regenerate_from_provenance_bitwise():
    train, test = small_alphabet(seed=9)
    again = data.regenerate(train.provenance)
    assert np.array_equal(train.images, again.images)
    assert np.array_equal(train.labels, again.labels)
    spec = data.SynthSourceSpec(num_classes=4, difficulty=2,
                                train_per_class=3, test_per_class=2, seed=4)
    s_train, _ = data.gen_synth_source(spec)
    s_again = data.regenerate(s_train.provenance)
    assert np.array_equal(s_train.images, s_again.images)


def test_synth_single_class_accepted():
    spec = data.SynthSourceSpec(num_classes=1, difficulty=1,
                                train_per_class=2, test_per_class=2)
    train, test = data.gen_synth_source(spec)
    assert train.num_classes == 1
    assert np.all(train.labels == 0)


def test_synth_rejects_class_overflow_with_max():
    spec = data.SynthSourceSpec(num_classes=5, difficulty=1,
                                train_per_class=1, test_per_class=1)
    with pytest.raises(ValueError, match="maximum supported is 4"):
        data.gen_synth_source(spec)


def test_synth_difficulty_nesting_projections_collide():
    # dropping any factor must collapse at least one class pair
    for d in (2, 3, 4):
        spec = data.SynthSourceSpec(num_classes=min(10, 4 ** d), difficulty=d,
                                    train_per_class=1, test_per_class=1)
        tuples = data._class_tuples(spec)
        assert len(set(tuples)) == len(tuples)
        for drop in range(d):
            proj = [t[:drop] + t[drop + 1:] for t in tuples]
            assert len(set(proj)) < len(proj), f"factor {drop} is redundant"


def _linear_probe_accuracy(train, test, epochs=800, lr=2.0, wd=1e-2):
    # independent oracle: ridge-regularized multinomial logistic regression
    # on raw (centered) pixels
    xtr = train.images.reshape(len(train), -1).astype(np.float64) - 0.5
    xte = test.images.reshape(len(test), -1).astype(np.float64) - 0.5
    k = train.num_classes
    w = np.zeros((xtr.shape[1], k))
    b = np.zeros(k)
    y = train.labels
    for _ in range(epochs):
        z = xtr @ w + b
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        p[np.arange(len(y)), y] -= 1
        p /= len(y)
        w -= lr * (xtr.T @ p + wd * w)
        b -= lr * p.sum(0)
    pred = (xte @ w + b).argmax(1)
    return (pred == test.labels).mean()


def test_synth_difficulty1_linearly_separable():
    spec = data.SynthSourceSpec(num_classes=4, difficulty=1,
                                train_per_class=100, test_per_class=50,
                                seed=1)
    train, test = data.gen_synth_source(spec)
    assert _linear_probe_accuracy(train, test) > 0.99


def test_synth_difficulty3_defeats_linear_probe():
    spec = data.SynthSourceSpec(num_classes=10, difficulty=3,
                                train_per_class=100, test_per_class=50,
                                seed=1)
    train, test = data.gen_synth_source(spec)
    assert _linear_probe_accuracy(train, test) < 0.60


def test_archive_round_trip(tmp_path):
    train, _ = small_alphabet(seed=2)
    path = tmp_path / "alpha"
    data.save_archive(train, path)
    loaded = data.load_archive(path)
    assert np.array_equal(loaded.images, train.images)
    assert np.array_equal(loaded.labels, train.labels)
    assert loaded.num_classes == train.num_classes
    assert loaded.split == train.split
    assert loaded.provenance == train.provenance


def test_archive_checksum_fault(tmp_path):
    train, _ = small_alphabet(seed=2)
    path = tmp_path / "alpha"
    data.save_archive(train, path)
    blob = (path / "images.bin").read_bytes()
    (path / "images.bin").write_bytes(
        bytes([blob[0] ^ 0xFF]) + blob[1:])
    with pytest.raises(data.ChecksumError):
        data.load_archive(path)


def test_archive_truncated_fault(tmp_path):
    train, _ = small_alphabet(seed=2)
    path = tmp_path / "alpha"
    data.save_archive(train, path)
    blob = (path / "images.bin").read_bytes()
    (path / "images.bin").write_bytes(blob[: len(blob) // 2])
    with pytest.raises(data.TruncatedPayloadError):
        data.load_archive(path)


def test_archive_corrupt_manifest(tmp_path):
    train, _ = small_alphabet(seed=2)
    path = tmp_path / "alpha"
    data.save_archive(train, path)
    (path / "manifest.json").write_text("{not json")
    with pytest.raises(data.ManifestError):
        data.load_archive(path)


def test_archive_empty_dataset(tmp_path):
    empty = data.Dataset(np.zeros((0, 1, 32, 32), dtype=np.float32),
                         np.zeros(0, dtype=np.int32), 26, "test",
                         {"generator": "alphabet", "split": "test"})
    path = tmp_path / "empty"
    data.save_archive(empty, path)
    loaded = data.load_archive(path)
    assert len(loaded) == 0
    assert json.loads((path / "manifest.json").read_text())["shape"][0] == 0


def test_batch_iter_single_batch_when_large():
    train, _ = small_alphabet(train=1)
    batches = list(data.batch_iter(train, batch_size=100, shuffle_seed=0))
    assert len(batches) == 1
    assert batches[0][0].shape[0] == 26


def test_batch_iter_reproducible_order():
    train, _ = small_alphabet(train=2)
    a = [lbl.tolist() for _, lbl in
         data.batch_iter(train, 8, shuffle_seed=3, epoch=1)]
    b = [lbl.tolist() for _, lbl in
         data.batch_iter(train, 8, shuffle_seed=3, epoch=1)]
    assert a == b
    c = [lbl.tolist() for _, lbl in
         data.batch_iter(train, 8, shuffle_seed=3, epoch=2)]
    assert a != c


def test_batch_iter_partial_final_batch():
    train, _ = small_alphabet(train=1)
    sub = train.subset(np.arange(10))
    sizes = [img.shape[0] for img, _ in data.batch_iter(sub, 4, 0)]
    assert sizes == [4, 4, 2]


def test_normalization_round_trip_stays_in_range():
    train, _ = small_alphabet()
    mean, std = data.normalization_stats(train)
    z = (train.images - mean[None, :, None, None]) / std[None, :, None, None]
    back = z * std[None, :, None, None] + mean[None, :, None, None]
    assert back.min() >= -1e-5 and back.max() <= 1 + 1e-5
