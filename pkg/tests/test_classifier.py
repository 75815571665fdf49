import numpy as np
import pytest
import torch

from afg_lab.classifier import (TrainSettings, accuracy, batch_features, build_model, decode_snapshot,
                                default_arch, encode_snapshot, forward_with_features, load_snapshot, predict,
                                save_snapshot, softmax_predict, train)
from afg_lab.data import DatasetSplit, ImageExample
from afg_lab.errors import FormatError, InputError, IntegrityError, ValidationError

from helpers import LAYER_PROBES, central_difference_check


def tiny_arch():
    return default_arch((8, 8, 3), 3, widths=(4, 4, 4, 4), hidden=8, pool_after=(True, False, False, False))


@pytest.mark.parametrize("kind", sorted(LAYER_PROBES))
def test_gradients_match_central_differences(kind):
    assert central_difference_check(LAYER_PROBES[kind]) < 1e-3


def test_default_arch_gradients():
    arch = default_arch((8, 8, 2), 3, widths=(3, 3, 3, 3), hidden=4)
    assert central_difference_check(arch, probes=6) < 1e-3


def test_arch_mismatch_names_layers():
    arch = tiny_arch()
    arch["layers"][3]["in"] = 7  # conv2 declares the wrong input width
    with pytest.raises(ValidationError, match="conv2.*conv1"):
        build_model(arch)


def test_feature_shapes_channel_last():
    m = build_model(tiny_arch(), 0)
    assert m.layer_names == ["conv1", "conv2", "conv3", "conv4"]
    logits, stack = forward_with_features(m, np.full((8, 8, 3), 0.5, np.float32))
    assert logits.shape == (3,)
    assert [f.shape for f in stack.per_layer] == [(8, 8, 4)] + [(4, 4, 4)] * 3
    assert all((f >= 0).all() for f in stack.per_layer)  # captured after ReLU


def test_batch_features_agree_with_single():
    m = build_model(tiny_arch(), 1)
    pix = np.random.default_rng(0).uniform(size=(3, 8, 8, 3)).astype(np.float32)
    batch = batch_features(m, pix)
    _, one = forward_with_features(m, pix[1])
    for b, s in zip(batch, one.per_layer):
        np.testing.assert_allclose(b[1], s, rtol=1e-6, atol=1e-6)


def test_softmax_predict_tie_first_index():
    cls, conf = softmax_predict(np.array([1.0, 3.0, 3.0]))
    assert cls == 1
    assert conf == pytest.approx(np.exp(3) / (np.exp(1) + 2 * np.exp(3)))


def test_predict_rejects_wrong_shape():
    m = build_model(tiny_arch())
    with pytest.raises(InputError):
        predict(m, np.zeros((4, 4, 3), np.float32))


def _toy_split():
    rng = np.random.default_rng(0)
    ex = []
    for i in range(60):
        c = i % 3
        pix = rng.uniform(0, 0.2, (8, 8, 3)).astype(np.float32)
        pix[:, :, c] += 0.7
        ex.append(ImageExample(pix, c, f"x{i}"))
    return DatasetSplit(ex[:45], ex[45:], ["r", "g", "b"], 0)


def test_training_fits_a_separable_toy_set():
    split = _toy_split()
    m = train(build_model(tiny_arch(), 0), split, TrainSettings(lr=0.05, epochs=15, batch_size=8))
    assert accuracy(m, split.train) >= 0.95
    assert m.meta["losses"][-1] < m.meta["losses"][0]


def test_zero_epochs_is_identity_copy():
    split = _toy_split()
    m = build_model(tiny_arch(), 0)
    out = train(m, split, TrainSettings(epochs=0))
    assert out is not m and out.checksum() == m.checksum()


def test_training_is_seeded():
    split = _toy_split()
    hyper = TrainSettings(lr=0.05, epochs=2, batch_size=8, seed=3)
    a = train(build_model(tiny_arch(), 0), split, hyper)
    b = train(build_model(tiny_arch(), 0), split, hyper)
    assert a.checksum() == b.checksum()


def test_label_beyond_width():
    split = _toy_split()
    m = build_model(default_arch((8, 8, 3), 2, widths=(2, 2, 2, 2), hidden=4))
    with pytest.raises(ValidationError):
        train(m, split, TrainSettings(epochs=1))


def test_snapshot_round_trip(tmp_path):
    m = build_model(tiny_arch(), 4)
    m.meta["note"] = "x"
    path = save_snapshot(m, tmp_path / "m.afgm")
    back = load_snapshot(path)
    assert back.checksum() == m.checksum() and back.arch == m.arch and back.meta == m.meta
    x = torch.rand(2, 3, 8, 8)
    assert torch.equal(back.net(x), m.net(x))


def test_snapshot_corruption():
    buf = bytearray(encode_snapshot(build_model(tiny_arch())))
    buf[-10] ^= 1
    with pytest.raises(IntegrityError):
        decode_snapshot(bytes(buf))
    with pytest.raises(FormatError):
        decode_snapshot(bytes(buf[:-3]))
    with pytest.raises(FormatError):
        decode_snapshot(b"NOPE" + bytes(buf[4:]))
