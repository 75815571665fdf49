import numpy as np
import pytest

from afg_lab.afg import AFG, encode_mixed_label
from afg_lab.errors import ConfigurationError, ValidationError
from afg_lab.evaluation import (ConstantRecognizer, EvalReport, OracleRecognizer, RandomRecognizer,
                                backend_comparison, channel_ablation, clean_afg_accuracy, cross_attack_matrix,
                                cross_model_transfer, detection_accuracy, flatten_reports, iou_score,
                                iou_values, permuted_label_control, predicted_set, read_reports,
                                recognition_iou, truth_set, write_reports)
from afg_lab.multilabel import RecognizerSettings, train_recognizer

from afg_fixtures import synthetic_afgs


def test_iou_by_hand():
    assert iou_score({1, 2}, {1, 2}) == 1.0
    assert iou_score({1}, {1, 2}) == 0.5
    assert iou_score({3}, {1, 2}) == 0.0
    assert iou_score({1, 3}, {1, 2}) == pytest.approx(1 / 3)
    with pytest.raises(ValidationError):
        iou_score(set(), {1})


def test_truth_and_predicted_sets():
    lab = encode_mixed_label(2, 0, 3)
    a = AFG(np.zeros((2, 2, 1), np.float32), lab)
    assert truth_set(a) == {0, 2}
    assert truth_set(AFG(a.tensor, encode_mixed_label(1, None, 3))) == {1}
    s = np.array([0.1, 0.2, 0.9, 0.8, 0.1, 0.3])
    assert predicted_set(s, 3, "split") == {2, 0}
    assert predicted_set(s, 3, "top2") == {2, 0}
    s2 = np.array([0.1, 0.2, 0.9, 0.3, 0.1, 0.3])
    assert predicted_set(s2, 3, "split") == {2}
    assert predicted_set(s2, 3, "top2") == {2}
    with pytest.raises(ValidationError):
        predicted_set(s, 3, "beam")


def test_oracle_scores_one_everywhere():
    items = synthetic_afgs(n_per_class=4)
    ctx = {"suite": "selftest"}
    assert detection_accuracy(OracleRecognizer("mixed", 3), items, ctx).value == 1.0
    assert detection_accuracy(OracleRecognizer("binary", 3), items, ctx).value == 1.0
    clean = [a for a in items if not a.label.is_adversarial]
    assert clean_afg_accuracy(OracleRecognizer("single", 3), clean, ctx).value == 1.0
    for mode in ("split", "top2"):
        assert recognition_iou(OracleRecognizer("mixed", 3), items, mode, ctx).value == 1.0


def test_constant_and_random_controls():
    items = synthetic_afgs(n_per_class=6)
    const = ConstantRecognizer(np.eye(6)[0], "mixed", 3)
    det = detection_accuracy(const, items)
    truth = np.array([a.label.is_adversarial for a in items])
    assert det.value == pytest.approx((~truth).mean())
    iou = recognition_iou(const, items).value
    assert 0 < iou < 1
    rnd = RandomRecognizer(3, "single", 3, seed=1)
    clean = [a for a in items if not a.label.is_adversarial]
    assert clean_afg_accuracy(rnd, clean).value <= 0.8


def test_metric_guards():
    items = synthetic_afgs(n_per_class=3)
    with pytest.raises(ValidationError):
        detection_accuracy(OracleRecognizer(), [a for a in items if a.label.is_adversarial])
    with pytest.raises(ValidationError):
        clean_afg_accuracy(OracleRecognizer("single", 3), items)
    with pytest.raises(ValidationError):
        recognition_iou(OracleRecognizer(), [])
    with pytest.raises(ValidationError):
        EvalReport("x", 1.5, 1, "")
    with pytest.raises(ValidationError):
        EvalReport("x", 0.5, 0, "")


def test_fingerprint_tracks_context():
    items = synthetic_afgs(n_per_class=3)
    a = recognition_iou(OracleRecognizer("mixed", 3), items, "split", {"seed": 0})
    b = recognition_iou(OracleRecognizer("mixed", 3), items, "split", {"seed": 0})
    c = recognition_iou(OracleRecognizer("mixed", 3), items, "split", {"seed": 1})
    assert a.config_fingerprint == b.config_fingerprint != c.config_fingerprint


def test_cross_attack_matrix_cells():
    items = synthetic_afgs(n_per_class=3)
    recs = {"BIM": OracleRecognizer("mixed", 3), "FGSM": OracleRecognizer("mixed", 3)}
    m = cross_attack_matrix(recs, {"BIM": items, "FGSM": items, "DEEPFOOL": []})
    assert m[("BIM", "FGSM")].value == 1.0
    assert m[("BIM", "DEEPFOOL")] is None and m[("DEEPFOOL", "BIM")] is None
    with pytest.raises(ValidationError):
        cross_attack_matrix({"BIM": recs["BIM"]}, {"BIM": items})


def test_cross_model_geometry():
    train = synthetic_afgs(n_per_class=3, channels=3)
    rec = train_recognizer(train, "linear-multilabel", RecognizerSettings(epochs=1))
    other = synthetic_afgs(n_per_class=3, channels=6, seed=4)
    with pytest.raises(ConfigurationError):
        cross_model_transfer(rec, other)
    rep = cross_model_transfer(rec, other, "FML")
    assert rep.n == len(other)


def _fake_trainer(items, backend):
    return OracleRecognizer("mixed", 3)


def test_ablation_columns_and_backends():
    train, test = synthetic_afgs(n_per_class=3, channels=6), synthetic_afgs(n_per_class=3, channels=6, seed=1)
    rows = channel_ablation(train, test, ["ALL", "F3", "L3", "F3L3", "FML"], trainer=_fake_trainer)
    assert [r["policy"] for r in rows] == ["ALL", "F3", "L3", "F3L3", "FML"]
    for r in rows:
        assert set(r) == {"policy", "all", "clean_only", "adversarial_only"}
        assert r["all"].value == 1.0
    out = backend_comparison(train, test, ["deep-cnn", "linear-multilabel"], trainer=_fake_trainer)
    assert [r["backend"] for r in out] == ["deep-cnn", "linear-multilabel"]


def test_permuted_control_is_low():
    train, test = synthetic_afgs(seed=0), synthetic_afgs(n_per_class=6, seed=1)
    hyper = RecognizerSettings(lr=0.02, epochs=15, batch_size=8)
    real = recognition_iou(train_recognizer(train, "deep-cnn", hyper), test).value
    ctrl = permuted_label_control(train, test, "deep-cnn", hyper, seed=0).value
    assert real - ctrl >= 0.25


def test_reports_round_trip(tmp_path):
    items = synthetic_afgs(n_per_class=2)
    nested = {"a": recognition_iou(OracleRecognizer("mixed", 3), items), "b": [None, {"c": EvalReport("m", 0.25, 3, "f")}]}
    reps = flatten_reports(nested)
    assert [r.metric_name for r in reps] == ["recognition_iou", "m"]
    write_reports(reps, tmp_path / "r.json", tmp_path / "r.csv")
    assert read_reports(tmp_path / "r.json") == reps
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "metric_name,value,n,config_fingerprint"


def test_iou_values_per_item():
    items = synthetic_afgs(n_per_class=2)
    vals = iou_values(OracleRecognizer("mixed", 3), items)
    assert vals.shape == (len(items),) and (vals == 1).all()
