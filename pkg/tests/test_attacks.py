import numpy as np
import pytest
import torch

from afg_lab.attacks import (AttackConfig, attack_dataset, bim, deepfool, deepfool_batch, fgsm, load_records,
                             run_batch, save_records, success_summary)
from afg_lab.classifier import build_model, to_batch
from afg_lab.data import ImageExample
from afg_lab.errors import AttackError, InputError, ValidationError

from helpers import AffineBinary


def test_toy_model_is_accurate(toy_model, toy_split):
    assert toy_model.meta["train_accuracy"] >= 0.95


def test_fgsm_zero_budget_is_noop(toy_model, toy_split):
    recs = attack_dataset(toy_model, toy_split.test, AttackConfig("FGSM", 0.0))
    for r in recs:
        assert np.array_equal(r.adversarial, r.original.pixels)
        assert not r.success
        assert not r.perturbation.any()


def test_fgsm_matches_hand_step(toy_model, toy_split):
    ex = toy_split.test[0]
    x = to_batch(ex.pixels).requires_grad_(True)
    loss = torch.nn.functional.cross_entropy(toy_model.net(x), torch.tensor([ex.label]))
    loss.backward()
    want = np.clip(ex.pixels + 0.05 * np.sign(x.grad[0].permute(1, 2, 0).numpy()), 0, 1)
    rec = fgsm(toy_model, ex, AttackConfig("FGSM", 0.05))
    np.testing.assert_array_equal(rec.adversarial, want.astype(np.float32))


def test_bim_single_step_equals_fgsm(toy_model, toy_split):
    pix = np.stack([e.pixels for e in toy_split.test[:16]])
    labels = [e.label for e in toy_split.test[:16]]
    a, _ = run_batch(toy_model, pix, labels, AttackConfig("FGSM", 0.03))
    b, _ = run_batch(toy_model, pix, labels, AttackConfig("BIM", 0.03, 1, 0.03))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("name,eps,its", [("FGSM", 0.02, 1), ("BIM", 0.02, 10)])
def test_budget_and_range(toy_model, toy_split, name, eps, its):
    for r in attack_dataset(toy_model, toy_split.test, AttackConfig(name, eps, its)):
        assert np.abs(r.perturbation).max() <= eps + 1e-6
        assert r.adversarial.min() >= 0 and r.adversarial.max() <= 1
        np.testing.assert_allclose(r.adversarial, np.clip(r.original.pixels + r.perturbation, 0, 1), atol=1e-7)
        assert r.success == (r.adv_label != r.true_label and r.error is None)


def test_bim_at_least_as_strong_as_fgsm(toy_model, toy_split):
    f = success_summary(attack_dataset(toy_model, toy_split.test, AttackConfig("FGSM", 0.1)))
    b = success_summary(attack_dataset(toy_model, toy_split.test, AttackConfig("BIM", 0.1, 20, 0.01)))
    assert b["success_rate"] >= f["success_rate"]


def test_deepfool_affine_closed_form():
    x = torch.tensor([0.6, 0.4]).view(1, 2, 1, 1)
    adv, flat = deepfool_batch(AffineBinary(), x, torch.tensor([0]), iterations=1, overshoot=0.0)
    step = (adv - x).flatten()
    np.testing.assert_allclose(step.numpy(), [-0.1, 0.1], atol=1e-4)
    assert not flat.any()
    # the step lands on the decision boundary w.x = 0
    assert abs(float(adv.flatten() @ torch.tensor([1.0, -1.0]))) < 1e-4


def test_deepfool_overshoot_crosses():
    x = torch.tensor([0.6, 0.4]).view(1, 2, 1, 1)
    net = AffineBinary()
    adv, _ = deepfool_batch(net, x, torch.tensor([0]), iterations=80, overshoot=0.02)
    assert int(net(adv).argmax()) == 1
    np.testing.assert_allclose((adv - x).flatten().numpy(), [-0.102, 0.102], atol=1e-5)


def test_deepfool_flat_logits():
    arch = {"input_shape": [2, 2, 1], "num_outputs": 2, "layers": [
        {"type": "conv", "name": "conv1", "in": 1, "out": 1, "kernel": 1, "bias": False},
        {"type": "flatten"}, {"type": "dense", "name": "fc", "in": 4, "out": 2}]}
    m = build_model(arch)
    with torch.no_grad():
        m.net.mods[0].weight.zero_()
    ex = ImageExample(np.full((2, 2, 1), 0.5), 0)
    with pytest.raises(AttackError, match="flat logits"):
        deepfool(m, ex, AttackConfig("DEEPFOOL", iterations=5))


def test_deepfool_succeeds_on_toy(toy_model, toy_split):
    s = success_summary(attack_dataset(toy_model, toy_split.test, AttackConfig.defaults("DEEPFOOL")))
    assert s["success_rate"] >= 0.9


def test_per_image_entry_points_validate(toy_model):
    with pytest.raises(InputError):
        bim(toy_model, ImageExample(np.zeros((4, 4, 3)), 0), AttackConfig("BIM", 0.1, 2))
    with pytest.raises(ValidationError):
        AttackConfig("PGD")
    with pytest.raises(ValidationError):
        AttackConfig("FGSM", -1.0)
    assert AttackConfig("BIM", 0.05).step == pytest.approx(0.005)


def test_defaults():
    assert AttackConfig.defaults("bim") == AttackConfig("BIM", 0.005, 100)
    assert AttackConfig.defaults("deepfool").iterations == 80


def test_records_round_trip(toy_model, toy_split, tmp_path):
    recs = attack_dataset(toy_model, toy_split.test[:5], AttackConfig("BIM", 0.05, 3))
    save_records(recs, tmp_path / "BIM")
    back = load_records(tmp_path / "BIM")
    assert [r.original.uid for r in back] == [r.original.uid for r in recs]
    for a, b in zip(recs, back):
        assert np.array_equal(a.adversarial, b.adversarial) and a.success == b.success
        assert a.attack == b.attack
