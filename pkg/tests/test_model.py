import warnings

import numpy as np
import pytest
import torch

from egsnet.losses import alignment_penalty
from egsnet.model import EGSNet, Encoder, classify_emotion, encode, module_digest, split_shared
from egsnet.optim import adam_step, init_moments

from make_golden import GOLDEN, compute


def _images(n, side=16, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, size=(n, side, side, 3)).astype(np.float32)


def test_empty_batch():
    enc = Encoder(channels=8, blocks=2)
    assert encode(enc, np.zeros((0, 16, 16, 3), np.float32)).shape == (0, 8)


def test_duplicate_rows_identical_features():
    enc = Encoder(channels=8, blocks=2).eval()
    x = _images(1)
    with torch.no_grad():
        f = encode(enc, np.concatenate([x, x, x]))
    assert torch.equal(f[0], f[1]) and torch.equal(f[1], f[2])


def test_shape_mismatch():
    enc = Encoder(channels=8, blocks=2, image_side=16)
    with pytest.raises(ValueError):
        encode(enc, _images(2, side=12))
    with pytest.raises(ValueError):
        encode(enc, np.zeros((2, 16, 16, 1), np.float32))


def test_golden_features_and_logits():
    golden = np.load(GOLDEN)
    feats, logits = compute()
    np.testing.assert_allclose(feats, golden["features"], atol=1e-6, rtol=0)
    np.testing.assert_allclose(logits, golden["logits"], atol=1e-6, rtol=0)


def test_zero_classifier_gives_uniform_softmax():
    clf = torch.nn.Linear(4, 7)
    torch.nn.init.zeros_(clf.weight)
    torch.nn.init.zeros_(clf.bias)
    logits = classify_emotion(clf, torch.randn(3, 4))
    assert torch.all(logits == 0)
    np.testing.assert_allclose(torch.softmax(logits, 1).detach().numpy(), 1 / 7)


def test_one_hot_classifier_follows_dominant_feature():
    clf = torch.nn.Linear(4, 4)
    with torch.no_grad():
        clf.weight.copy_(torch.eye(4) * 100)
        clf.bias.zero_()
    feats = torch.tensor([[0.1, 0.9, 0.2, 0.0], [0.7, 0.1, 0.1, 0.3]])
    assert classify_emotion(clf, feats).argmax(1).tolist() == [1, 0]
    with pytest.raises(ValueError):
        classify_emotion(clf, torch.zeros(2, 3))


def test_shared_mode_aliases_updates():
    m = EGSNet(7, channels=8, blocks=2)
    assert m.shared and m.similarity_encoder is m.emotion_encoder
    with torch.no_grad():
        next(m.emotion_encoder.parameters()).add_(1.0)
    assert module_digest(m.similarity_encoder) == module_digest(m.emotion_encoder)


def test_split_copies_then_decouples():
    m = EGSNet(7, channels=8, blocks=2)
    split_shared(m)
    assert not m.shared
    x = _images(5)
    m.eval()
    with torch.no_grad():
        fe, fs = encode(m.emotion_encoder, x), encode(m.similarity_encoder, x)
    assert torch.equal(fe, fs)
    assert alignment_penalty(fe, fs).item() == 0
    before = module_digest(m.similarity_encoder)
    # one gradient step on the emotion encoder only
    m.train()
    params = list(m.emotion_encoder.parameters())
    loss = encode(m.emotion_encoder, x).pow(2).sum()
    grads = torch.autograd.grad(loss, params)
    adam_step(params, grads, [init_moments(p) for p in params])
    assert module_digest(m.similarity_encoder) == before
    m.eval()
    with torch.no_grad():
        assert torch.equal(encode(m.similarity_encoder, x), fs)
        assert not torch.equal(encode(m.emotion_encoder, x), fe)


def test_split_twice_warns():
    m = EGSNet(7, channels=8, blocks=2).split()
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        split_shared(m)
    assert any("no-op" in str(x.message) for x in w)


def test_parameter_groups():
    m = EGSNet(7, metric="relation", channels=8, blocks=2)
    shared_names = set(m.similarity_parameters())
    assert any(n.startswith("metric.") for n in shared_names)
    m.split()
    emo, sim = set(m.emotion_parameters()), set(m.similarity_parameters())
    assert not emo & sim
    assert emo | sim == set(m.all_parameters())


def test_backbone_swap_keeps_contract():
    pytest.importorskip("torchvision")
    enc = Encoder(backbone="resnet18", image_side=32).eval()
    with torch.no_grad():
        f = encode(enc, _images(2, side=32))
    assert f.shape == (2, 512)
    m = EGSNet(7, backbone="resnet18", image_side=32)
    assert m.classifier.in_features == 512
