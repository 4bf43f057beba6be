import numpy as np
import pytest

from repre.decoder import Decoder
from repre.encoder import Encoder, EncoderConfig
from repre.pipeline.checkpoint import load_encoder, save_checkpoint
from repre.pipeline.probe import (EncoderMutatedError, accuracy, extract_features, linear_probe, split_dataset,
                                  train_linear)
from repre.pipeline.train import Trainer


def small_encoder():
    return Encoder(EncoderConfig(image_size=16, patch_size=4, depth=2, width=8, heads=2, taps=1),
                   np.random.default_rng(0))


def test_separable_features_reach_full_accuracy(rng):
    centers = np.eye(3) * 5
    labels = rng.integers(0, 3, 90)
    feats = centers[labels] + 0.3 * rng.standard_normal((90, 3))
    head = train_linear(feats, labels, 3, steps=200)
    assert accuracy(head, feats, labels) == 1.0


def test_random_labels_stay_near_chance(rng):
    feats = rng.standard_normal((400, 4))
    labels = rng.integers(0, 4, 400)
    (ftr, ytr), (fte, yte) = split_dataset(feats, labels)
    head = train_linear(ftr, ytr, 4, steps=200)
    assert abs(accuracy(head, fte, yte) - 0.25) < 0.1


def test_train_linear_input_checks(rng):
    with pytest.raises(ValueError, match="labels"):
        train_linear(rng.standard_normal((4, 2)), np.arange(3), 3)
    with pytest.raises(ValueError, match=r"\[0, 2\)"):
        train_linear(rng.standard_normal((3, 2)), np.array([0, 1, 2]), 2)


def test_probe_leaves_encoder_untouched_and_reports_fingerprint(rng):
    enc = small_encoder()
    before = enc.fingerprint()
    images = rng.uniform(size=(24, 16, 16, 3))
    labels = np.arange(24) % 2
    res = linear_probe(enc, (images[:16], labels[:16]), (images[16:], labels[16:]), steps=20)
    assert res.fingerprint == before == enc.fingerprint()
    assert res.num_classes == 2
    assert 0 <= res.test_accuracy <= 1
    with pytest.raises(ValueError, match="counts differ"):
        linear_probe(enc, (images[:4], labels[:3]), (images[4:], labels[4:]))


def test_mutation_is_detected(rng, monkeypatch):
    import repre.pipeline.probe as probe_mod

    enc = small_encoder()
    real = probe_mod.train_linear

    def sneaky(*a, **kw):
        enc.patch_proj.weight.data = enc.patch_proj.weight.data + 1.0
        return real(*a, **kw)

    monkeypatch.setattr(probe_mod, "train_linear", sneaky)
    images = rng.uniform(size=(8, 16, 16, 3))
    with pytest.raises(EncoderMutatedError):
        linear_probe(enc, (images, np.arange(8) % 2), (images, np.arange(8) % 2), steps=2)


def test_features_are_chunk_invariant(rng):
    enc = small_encoder()
    images = rng.uniform(size=(7, 16, 16, 3))
    np.testing.assert_array_equal(extract_features(enc, images, chunk=3), extract_features(enc, images, chunk=100))


def test_split_is_deterministic_and_disjoint():
    x = np.arange(20)
    (a, _), (b, _) = split_dataset(x, x)
    (c, _), (d, _) = split_dataset(x, x)
    assert np.array_equal(a, c) and np.array_equal(b, d)
    assert len(b) == 5 and not set(a) & set(b)


def test_probe_path_never_builds_a_decoder(tiny, tmp_path, monkeypatch, rng):
    save_checkpoint(tmp_path / "c.bin", Trainer(tiny()))

    def forbidden(*a, **kw):
        raise AssertionError("decoder constructed during evaluation")

    monkeypatch.setattr(Decoder, "__init__", forbidden)
    enc, cfg = load_encoder(tmp_path / "c.bin")
    images = rng.uniform(size=(8, 16, 16, 3))
    linear_probe(enc, (images, np.arange(8) % 2), (images, np.arange(8) % 2), cfg.augmentation(), steps=2)
