import numpy as np
import pytest

from robustlab import models
from robustlab.autodiff import ShapeError


def cfg(blocks=2, base_width=4, size=16, classes=5):
    return models.ModelConfig(blocks=blocks, base_width=base_width,
                              input_shape=(1, size, size),
                              num_classes=classes)


def test_build_deterministic_bitwise():
    m1 = models.build_model(cfg(), seed=3)
    m2 = models.build_model(cfg(), seed=3)
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])
    m3 = models.build_model(cfg(), seed=4)
    assert m1.params_checksum() != m3.params_checksum()


def test_capacity_strictly_increases():
    small = cfg(blocks=2, base_width=8, size=32)
    big = cfg(blocks=4, base_width=32, size=32)
    assert big.capacity_tag > small.capacity_tag
    assert cfg(blocks=3, base_width=8, size=32).capacity_tag > \
        cfg(blocks=2, base_width=8, size=32).capacity_tag
    assert cfg(blocks=2, base_width=16).capacity_tag > \
        cfg(blocks=2, base_width=8).capacity_tag


def test_capacity_tag_matches_actual_param_count():
    c = cfg(blocks=3, base_width=8, size=32, classes=7)
    m = models.build_model(c, seed=0)
    assert c.capacity_tag == sum(v.size for v in m.params.values())


def test_classifier_output_dim_follows_classes():
    m = models.build_model(cfg(classes=26), seed=0)
    z = m.logits(np.zeros((2, 1, 16, 16), dtype=np.float32))
    assert z.shape == (2, 26)


def test_input_too_small_rejected():
    with pytest.raises(ValueError):
        models.ModelConfig(blocks=5, base_width=4, input_shape=(1, 16, 16),
                           num_classes=3)


def test_fg_partition_exact():
    m = models.build_model(cfg(), seed=0)
    f, g = set(m.feature_params()), set(m.classifier_params())
    assert f | g == set(m.params)
    assert not (f & g)


def test_embedding_dim_independent_of_classes():
    a = models.build_model(cfg(classes=5), seed=0)
    b = models.build_model(cfg(classes=26), seed=0)
    x = np.random.default_rng(0).uniform(size=(3, 1, 16, 16)).astype(np.float32)
    assert a.embed(x).shape == b.embed(x).shape == (3, a.config.embedding_dim)


def test_embed_deterministic_and_order_preserving():
    m = models.build_model(cfg(), seed=1)
    x = np.random.default_rng(2).uniform(size=(6, 1, 16, 16)).astype(np.float32)
    e1 = m.embed(x)
    e2 = m.embed(x)
    assert np.array_equal(e1, e2)
    perm = np.array([3, 1, 5, 0, 2, 4])
    np.testing.assert_array_equal(m.embed(x[perm]), e1[perm])


def test_embeddings_differ_across_seeds():
    x = np.random.default_rng(5).uniform(size=(4, 1, 16, 16)).astype(np.float32)
    e1 = models.build_model(cfg(), seed=1).embed(x)
    e2 = models.build_model(cfg(), seed=2).embed(x)
    assert not np.allclose(e1, e2)


def test_classify_composition_identity_and_tie_break():
    m = models.build_model(cfg(), seed=0)
    x = np.random.default_rng(1).uniform(size=(4, 1, 16, 16)).astype(np.float32)
    z, pred = m.classify(x)
    emb = m.embed(x)
    np.testing.assert_allclose(emb @ m.params["g.w"] + m.params["g.b"], z,
                               rtol=1e-5)
    # lowest-index tie break
    assert np.array([[2.0, 2.0, 1.0]]).argmax(axis=1)[0] == 0


def test_softmax_of_logits_sums_to_one():
    from robustlab.autodiff import softmax
    m = models.build_model(cfg(), seed=0)
    x = np.random.default_rng(1).uniform(size=(3, 1, 16, 16)).astype(np.float32)
    z, _ = m.classify(x)
    np.testing.assert_allclose(softmax(z).sum(axis=1), 1.0, atol=1e-6)


def test_layer_activations_shapes():
    m = models.build_model(cfg(blocks=4, base_width=4, size=32), seed=0)
    x = np.random.default_rng(0).uniform(size=(5, 1, 32, 32)).astype(np.float32)
    a1 = m.layer_activations(x, depth=1)
    assert a1.shape == (5, 4)
    aall = m.layer_activations(x, depth="all")
    assert aall.shape == (5, 4 + 8 + 16 + 32)
    with pytest.raises(ValueError):
        m.layer_activations(x, depth=5)


def test_layer_activations_identical_params_identical_outputs():
    m1 = models.build_model(cfg(), seed=9)
    m2 = models.build_model(cfg(), seed=9)
    x = np.random.default_rng(0).uniform(size=(3, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(m1.layer_activations(x),
                                  m2.layer_activations(x))


def test_reinit_classifier_contract():
    m = models.build_model(cfg(classes=10), seed=0)
    before = m.params_checksum(prefix="f.")
    m2 = models.reinit_classifier(m, 26, seed=1)
    assert m2.config.num_classes == 26
    assert m2.params_checksum(prefix="f.") == before
    assert m2.params["g.w"].shape == (m.config.embedding_dim, 26)
    # same class count still reinitializes
    m3 = models.reinit_classifier(m, 10, seed=1)
    assert not np.array_equal(m3.params["g.w"], m.params["g.w"])


def test_checkpoint_round_trip(tmp_path):
    m = models.build_model(cfg(), seed=0, provenance={"regime": "standard"})
    m.norm_mean[:] = 0.4
    m.norm_std[:] = 0.25
    path = tmp_path / "ckpt"
    models.save_checkpoint(m, path)
    m2 = models.load_checkpoint(path)
    assert m2.params_checksum() == m.params_checksum()
    assert m2.provenance == m.provenance
    np.testing.assert_array_equal(m2.norm_mean, m.norm_mean)
    x = np.random.default_rng(0).uniform(size=(3, 1, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(m2.logits(x), m.logits(x))


def test_checkpoint_truncated(tmp_path):
    m = models.build_model(cfg(), seed=0)
    path = tmp_path / "ckpt"
    models.save_checkpoint(m, path)
    blob = (path / "params.bin").read_bytes()
    (path / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(models.TruncatedCheckpointError):
        models.load_checkpoint(path)


def test_checkpoint_checksum_and_version(tmp_path):
    import json
    m = models.build_model(cfg(), seed=0)
    path = tmp_path / "ckpt"
    models.save_checkpoint(m, path)
    blob = bytearray((path / "params.bin").read_bytes())
    blob[0] ^= 0xFF
    (path / "params.bin").write_bytes(bytes(blob))
    with pytest.raises(models.CheckpointChecksumError):
        models.load_checkpoint(path)
    models.save_checkpoint(m, path)
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["format_version"] = 99
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(models.VersionMismatchError):
        models.load_checkpoint(path)


def test_shape_mismatch_rejected():
    m = models.build_model(cfg(), seed=0)
    with pytest.raises(ShapeError):
        m.embed(np.zeros((2, 1, 8, 8), dtype=np.float32))


def test_normalization_applied_inside_model():
    m = models.build_model(cfg(), seed=0)
    x = np.random.default_rng(0).uniform(size=(2, 1, 16, 16)).astype(np.float32)
    base = m.logits(x)
    m.norm_std[:] = 0.1
    m.invalidate_graphs()
    assert not np.allclose(m.logits(x), base)
