"""Metrics over AFG datasets: detection accuracy, clean class accuracy,
label-set IoU, and the comparison tables built from them.

Every function takes a "recognizer": either a trained
:class:`~afg_lab.multilabel.RecognizerSnapshot` or any object exposing
``mode``, ``k_orig``, ``tau`` and ``score_items(items) -> (B, width)``
(the oracle and control recognizers below).
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .afg import AFG, ChannelPolicy, decode_prediction, resolve_policy, select_channels
from .errors import ConfigurationError, ValidationError
from .multilabel import (RecognizerSettings, RecognizerSnapshot, flags_from_scores, scores, train_recognizer)

DECODE_MODES = ("split", "top2")


@dataclass
class EvalReport:
    metric_name: str
    value: float
    n: int
    config_fingerprint: str
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValidationError(f"{self.metric_name}: value {self.value} outside [0, 1]")
        if self.n <= 0:
            raise ValidationError(f"{self.metric_name}: report needs n > 0")


def fingerprint(context: dict) -> str:
    blob = json.dumps(context, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


# --- recognizers usable in place of a trained snapshot -------------------------------

@dataclass
class OracleRecognizer:
    """Emits each sample's ground-truth code as its scores (harness self-test)."""
    mode: str = "mixed"
    k_orig: int = 10
    tau: float = 0.5

    def score_items(self, items: list[AFG]) -> np.ndarray:
        rows = []
        for a in items:
            if self.mode == "mixed":
                rows.append(a.label.vector)
            elif self.mode == "binary":
                rows.append(np.array([0, 1] if a.label.is_adversarial else [1, 0], np.float32))
            else:
                rows.append(np.eye(self.k_orig, dtype=np.float32)[a.label.original])
        return np.stack(rows)


@dataclass
class ConstantRecognizer:
    vector: np.ndarray
    mode: str = "mixed"
    k_orig: int = 10
    tau: float = 0.5

    def score_items(self, items: list[AFG]) -> np.ndarray:
        return np.tile(np.asarray(self.vector, np.float32), (len(items), 1))


@dataclass
class RandomRecognizer:
    width: int
    mode: str = "single"
    k_orig: int = 10
    tau: float = 0.5
    seed: int = 0

    def score_items(self, items: list[AFG]) -> np.ndarray:
        return np.random.default_rng(self.seed).uniform(size=(len(items), self.width)).astype(np.float32)


def score_items(rec, items: list[AFG]) -> np.ndarray:
    if isinstance(rec, RecognizerSnapshot):
        return scores(rec, items)
    return rec.score_items(items)


# --- label sets -------------------------------------------------------------------

def truth_set(a: AFG) -> set[int]:
    lab = a.label
    return {lab.original} | ({lab.adversarial} if lab.is_adversarial else set())


def predicted_set(s: np.ndarray, k_orig: int, decode_mode: str = "split", tau: float = 0.5) -> set[int]:
    """``split``: decode each half separately. ``top2``: the two highest
    entries of the whole vector (the runner-up only if it reaches ``tau``),
    folded onto the shared class vocabulary."""
    if decode_mode == "split":
        orig, adv = decode_prediction(s, k_orig, tau)
        return {orig} | ({adv} if adv is not None else set())
    if decode_mode == "top2":
        order = np.argsort(-np.asarray(s, np.float64), kind="stable")
        picked = [order[0]] + ([order[1]] if s[order[1]] >= tau else [])
        return {int(i) % k_orig for i in picked}
    raise ValidationError(f"unknown decode mode {decode_mode!r}")


def iou_score(pred: set, truth: set) -> float:
    if not pred or not truth:
        raise ValidationError("IoU needs non-empty label sets")
    return len(pred & truth) / len(pred | truth)


# --- metrics ---------------------------------------------------------------------

def _require(items):
    if not items:
        raise ValidationError("empty evaluation dataset")


def detection_accuracy(rec, items: list[AFG], context: dict | None = None,
                       metric_name: str = "detection_accuracy") -> EvalReport:
    _require(items)
    truth = np.array([a.label.is_adversarial for a in items])
    if truth.all() or not truth.any():
        raise ValidationError("detection accuracy needs both clean and adversarial samples")
    flags = flags_from_scores(score_items(rec, items), rec.mode, rec.k_orig, rec.tau)
    value = float((flags == truth).mean())
    return EvalReport(metric_name, value, len(items), fingerprint(context or {}),
                      {"mode": rec.mode})


def clean_afg_accuracy(rec, items: list[AFG], context: dict | None = None) -> EvalReport:
    _require(items)
    if any(a.label.is_adversarial for a in items):
        raise ValidationError("clean-AFG accuracy takes clean samples only")
    s = score_items(rec, items)[:, :rec.k_orig]
    pred = s.argmax(axis=1)
    truth = np.array([a.label.original for a in items])
    return EvalReport("clean_afg_accuracy", float((pred == truth).mean()), len(items),
                      fingerprint(context or {}))


def iou_values(rec, items: list[AFG], decode_mode: str = "split") -> np.ndarray:
    s = score_items(rec, items)
    return np.array([iou_score(predicted_set(row, rec.k_orig, decode_mode, rec.tau), truth_set(a))
                     for row, a in zip(s, items)])


def recognition_iou(rec, items: list[AFG], decode_mode: str = "split", context: dict | None = None,
                    metric_name: str = "recognition_iou") -> EvalReport:
    _require(items)
    vals = iou_values(rec, items, decode_mode)
    return EvalReport(metric_name, float(vals.mean()), len(items),
                      fingerprint(dict(context or {}, decode=decode_mode)), {"decode": decode_mode})


def cross_attack_matrix(recognizers: dict, datasets: dict, decode_mode: str = "split",
                        context: dict | None = None) -> dict:
    """IoU of the recognizer trained on attack A evaluated on attack B's AFGs.

    Keys are (train_attack, eval_attack); missing inputs give ``None``.
    """
    attacks = sorted(set(recognizers) | set(datasets))
    if len(attacks) < 2:
        raise ValidationError("cross-attack evaluation needs at least two attacks")
    out = {}
    for a in attacks:
        for b in attacks:
            if a in recognizers and datasets.get(b):
                ctx = dict(context or {}, train_attack=a, eval_attack=b)
                out[(a, b)] = recognition_iou(recognizers[a], datasets[b], decode_mode, ctx,
                                              metric_name=f"iou[{a}->{b}]")
            else:
                out[(a, b)] = None
    return out


def _geometry(items: list[AFG]) -> tuple:
    return tuple(items[0].tensor.shape)


def cross_model_transfer(rec, items: list[AFG], policy: str | ChannelPolicy | None = None,
                         decode_mode: str = "split", context: dict | None = None) -> EvalReport:
    """Evaluate a recognizer on AFGs from a different first model, after an
    optional channel policy that aligns layer counts."""
    _require(items)
    if policy is not None:
        items = [select_channels(a, policy) for a in items]
    want = rec.model.input_shape if isinstance(rec, RecognizerSnapshot) else _geometry(items)
    got = _geometry(items)
    if tuple(want) != got:
        raise ConfigurationError(f"recognizer expects AFGs shaped {tuple(want)}, dataset provides {got}; "
                                 "align layer counts with a channel policy")
    return recognition_iou(rec, items, decode_mode, context, metric_name="cross_model_iou")


def _default_trainer(hyper):
    def trainer(items, backend):
        return train_recognizer(items, backend, hyper)
    return trainer


def channel_ablation(train_items: list[AFG], test_items: list[AFG], policies, backend: str = "deep-cnn",
                     hyper: RecognizerSettings | None = None, decode_mode: str = "split",
                     context: dict | None = None, trainer=None) -> list[dict]:
    """Retrain per channel policy; each row has IoU on all, clean-only and
    adversarial-only test samples."""
    trainer = trainer or _default_trainer(hyper)
    rows = []
    n = train_items[0].num_channels
    for name in policies:
        pol = resolve_policy(name, n)
        tr = [select_channels(a, pol) for a in train_items]
        te = [select_channels(a, pol) for a in test_items]
        rec = trainer(tr, backend)
        ctx = dict(context or {}, policy=pol.name, backend=backend)
        row = {"policy": pol.name, "all": recognition_iou(rec, te, decode_mode, ctx, f"iou[{pol.name}]/all")}
        for label, keep in (("clean_only", False), ("adversarial_only", True)):
            sub = [a for a in te if a.label.is_adversarial == keep]
            row[label] = (recognition_iou(rec, sub, decode_mode, dict(ctx, subset=label),
                                          f"iou[{pol.name}]/{label}") if sub else None)
        rows.append(row)
    return rows


def backend_comparison(train_items: list[AFG], test_items: list[AFG], backends,
                       hyper: RecognizerSettings | None = None, decode_mode: str = "split",
                       context: dict | None = None, trainer=None) -> list[dict]:
    trainer = trainer or _default_trainer(hyper)
    rows = []
    for backend in backends:
        rec = trainer(train_items, backend)
        ctx = dict(context or {}, backend=backend)
        rows.append({"backend": backend,
                     "iou": recognition_iou(rec, test_items, decode_mode, ctx, f"iou[{backend}]")})
    return rows


def permuted_label_control(train_items: list[AFG], test_items: list[AFG], backend: str = "deep-cnn",
                           hyper: RecognizerSettings | None = None, seed: int = 0,
                           decode_mode: str = "split", context: dict | None = None, trainer=None) -> EvalReport:
    """IoU of a recognizer trained after shuffling labels across training samples."""
    trainer = trainer or _default_trainer(hyper)
    perm = np.random.default_rng(seed).permutation(len(train_items))
    shuffled = [AFG(a.tensor, train_items[p].label, a.provenance) for a, p in zip(train_items, perm)]
    rec = trainer(shuffled, backend)
    return recognition_iou(rec, test_items, decode_mode, dict(context or {}, control="permuted", seed=seed),
                           "permuted_label_iou")


# --- persistence -------------------------------------------------------------------

REPORT_FIELDS = ["metric_name", "value", "n", "config_fingerprint"]


def flatten_reports(obj) -> list[EvalReport]:
    """Collect every EvalReport inside nested dicts/lists (``None`` cells skipped)."""
    if isinstance(obj, EvalReport):
        return [obj]
    if isinstance(obj, dict):
        return [r for v in obj.values() for r in flatten_reports(v)]
    if isinstance(obj, (list, tuple)):
        return [r for v in obj for r in flatten_reports(v)]
    return []


def write_reports(reports: list[EvalReport], json_path, csv_path=None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps([asdict(r) for r in reports], indent=1, sort_keys=True), encoding="utf-8")
    if csv_path is not None:
        with Path(csv_path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_FIELDS)
            for r in reports:
                w.writerow([r.metric_name, repr(r.value), r.n, r.config_fingerprint])


def read_reports(json_path) -> list[EvalReport]:
    rows = json.loads(Path(json_path).read_text(encoding="utf-8"))
    return [EvalReport(**row) for row in rows]
