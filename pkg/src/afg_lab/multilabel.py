"""Second classifier over AFG tensors, plus the activation-level Detector
baseline.

Three target modes share one training loop (independent sigmoids, summed
binary cross-entropy):

* ``mixed``  - full mixed label, width 2K; recovers original and adversarial class
* ``binary`` - [clean, adversarial] one-hot, width 2
* ``single`` - one-hot original class, width K (clean-only class check)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .afg import AFG, MixedLabel, decode_prediction
from .classifier import (ModelSnapshot, TrainSettings, build_model, decode_snapshot, encode_snapshot, fit,
                         softmax_predict, to_batch)
from .errors import FormatError, InputError, ValidationError

BACKENDS = ("deep-cnn", "shallow-cnn", "linear-multilabel")
MODES = ("mixed", "binary", "single")


def backend_arch(backend: str, g: int, channels: int, width: int, grid: int = 2) -> dict:
    """Layer list for one recognizer backend on (g, g, channels) AFGs.

    ``deep-cnn`` embeds each of the grid x grid group tiles with one strided
    conv (kernel = stride = tile side), mixes neighbouring tiles with a 3x3
    conv, then classifies with two dense layers. Pooling stacks throw away the
    exact pixel values the tiles are made of and did markedly worse.
    """
    if backend == "deep-cnn":
        if grid < 1 or g % grid:
            raise ValidationError(f"AFG side {g} is not divisible into a {grid}x{grid} tile grid")
        tile, d = g // grid, 128
        layers = [{"type": "conv", "name": "embed", "in": channels, "out": d, "kernel": tile, "stride": tile},
                  {"type": "relu"},
                  {"type": "conv", "name": "mix", "in": d, "out": d, "kernel": 3, "padding": 1}, {"type": "relu"},
                  {"type": "flatten"}, {"type": "dense", "name": "fc1", "in": grid * grid * d, "out": 128},
                  {"type": "relu"}, {"type": "dense", "name": "fc2", "in": 128, "out": width}]
    elif backend == "shallow-cnn":
        side = (g + 2 * 2 - 5) // 2 + 1
        side //= 4
        layers = [{"type": "conv", "name": "conv1", "in": channels, "out": 16, "kernel": 5, "stride": 2,
                   "padding": 2}, {"type": "relu"}, {"type": "maxpool", "size": 4}, {"type": "flatten"},
                  {"type": "dense", "name": "fc1", "in": side * side * 16, "out": width}]
    elif backend == "linear-multilabel":
        layers = [{"type": "flatten"}, {"type": "dense", "name": "fc1", "in": g * g * channels, "out": width}]
    else:
        raise ValidationError(f"unknown backend {backend!r}; choose from {', '.join(BACKENDS)}")
    return {"input_shape": [g, g, channels], "num_outputs": width, "layers": layers}


@dataclass
class RecognizerSettings(TrainSettings):
    lr: float = 0.001
    epochs: int = 30
    grid: int = 2  # tiles per AFG side, sqrt(r)


@dataclass
class RecognizerSnapshot:
    backend: str
    model: ModelSnapshot
    mode: str
    k_orig: int
    mean: np.ndarray
    std: np.ndarray
    tau: float = 0.5
    meta: dict = field(default_factory=dict)

    @property
    def input_spec(self) -> tuple[int, int]:
        g, _, c = self.model.input_shape
        return g, c

    @property
    def output_width(self) -> int:
        return self.model.num_outputs


@dataclass
class RecognitionResult:
    scores: np.ndarray
    original: int
    adversarial: int | None

    @property
    def is_adversarial(self) -> bool:
        return self.adversarial is not None


def _targets(items: list[AFG], mode: str, k_orig: int) -> np.ndarray:
    if mode == "mixed":
        return np.stack([a.label.vector for a in items])
    if mode == "binary":
        return np.array([[0.0, 1.0] if a.label.is_adversarial else [1.0, 0.0] for a in items], np.float32)
    if mode == "single":
        return np.stack([np.eye(k_orig, dtype=np.float32)[a.label.original] for a in items])
    raise ValidationError(f"unknown mode {mode!r}")


def _stack(items) -> np.ndarray:
    return np.ascontiguousarray(np.stack([a.tensor if isinstance(a, AFG) else a for a in items]), dtype=np.float32)


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of (N, H, W, C), accumulated in float64 so the
    result does not depend on memory layout."""
    x64 = np.asarray(x, dtype=np.float64)
    mean = x64.mean(axis=(0, 1, 2))
    std = x64.std(axis=(0, 1, 2)) + 1e-6
    return mean.astype(np.float32), std.astype(np.float32)


def _bce_sum(logits, target):
    return F.binary_cross_entropy_with_logits(logits, target, reduction="sum") / len(logits)


def train_recognizer(items: list[AFG], backend: str = "deep-cnn", hyper: RecognizerSettings | None = None,
                     mode: str = "mixed", k_orig: int | None = None, tau: float = 0.5,
                     log=None) -> RecognizerSnapshot:
    hyper = hyper or RecognizerSettings()
    if not items:
        raise ValidationError("cannot train on an empty AFG dataset")
    widths = {len(a.label.code) for a in items}
    if len(widths) != 1:
        raise ValidationError(f"label lengths differ across the dataset: {sorted(widths)}")
    shapes = {a.tensor.shape for a in items}
    if len(shapes) != 1:
        raise ValidationError(f"tensor shapes differ across the dataset: {sorted(shapes)}")
    k_orig = k_orig or len(items[0].label.original_onehot)
    y = _targets(items, mode, k_orig)
    x = _stack(items)
    mean, std = channel_stats(x)
    g, _, c = x.shape[1:]
    model = build_model(backend_arch(backend, g, c, y.shape[1], hyper.grid), seed=hyper.seed)
    rec = RecognizerSnapshot(backend, model, mode, k_orig, mean, std, tau)
    if hyper.epochs == 0:
        return rec
    losses = fit(model.net, to_batch((x - mean) / std), torch.from_numpy(y), _bce_sum, hyper, log)
    rec.meta = {"losses": losses, "epochs": hyper.epochs, "lr": hyper.lr, "seed": hyper.seed, "n": len(items)}
    return rec


def binary_mode_train(items: list[AFG], backend: str = "deep-cnn", hyper: RecognizerSettings | None = None,
                      log=None) -> RecognizerSnapshot:
    return train_recognizer(items, backend, hyper, mode="binary", log=log)


def collapse_label(label: MixedLabel) -> str:
    return "adversarial" if label.is_adversarial else "clean"


def scores(rec: RecognizerSnapshot, tensors, batch_size: int = 256) -> np.ndarray:
    """Per-output sigmoid probabilities, shape (B, output_width)."""
    x = _stack(tensors) if len(tensors) else np.zeros((0,) + rec.model.input_shape, np.float32)
    if len(x) and tuple(x.shape[1:]) != rec.model.input_shape:
        raise InputError(f"AFG shape {tuple(x.shape[1:])} does not match recognizer input {rec.model.input_shape}")
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(torch.sigmoid(rec.model.net(to_batch((x[i:i + batch_size] - rec.mean) / rec.std))).numpy())
    return np.concatenate(out) if out else np.zeros((0, rec.output_width), np.float32)


def recognize(rec: RecognizerSnapshot, a: AFG) -> RecognitionResult:
    s = scores(rec, [a])[0]
    return result_from_scores(s, rec.k_orig, rec.tau)


def result_from_scores(s: np.ndarray, k_orig: int, tau: float = 0.5) -> RecognitionResult:
    orig, adv = decode_prediction(s, k_orig, tau)
    return RecognitionResult(np.asarray(s), orig, adv)


def flags_from_scores(s: np.ndarray, mode: str, k_orig: int, tau: float = 0.5) -> np.ndarray:
    """Adversarial flag per row for any recognizer mode."""
    if mode == "binary":
        return s[:, 1] > s[:, 0]
    if mode == "mixed":
        return s[:, k_orig:].max(axis=1) >= tau
    raise ValidationError(f"mode {mode!r} does not detect adversarial inputs")


def save_recognizer(rec: RecognizerSnapshot, path) -> Path:
    tag = {"backend": rec.backend, "mode": rec.mode, "k_orig": rec.k_orig, "tau": rec.tau,
           "mean": rec.mean.tolist(), "std": rec.std.tolist(), "meta": rec.meta}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_snapshot(rec.model, tag))
    return path


def load_recognizer(path) -> RecognizerSnapshot:
    path = Path(path)
    model, tag = decode_snapshot(path.read_bytes(), str(path))
    if "backend" not in tag:
        raise FormatError(f"{path}: snapshot carries no recognizer backend tag")
    return RecognizerSnapshot(tag["backend"], model, tag["mode"], tag["k_orig"],
                              np.array(tag["mean"], np.float32), np.array(tag["std"], np.float32),
                              tag["tau"], tag.get("meta", {}))


# --- Detector baseline --------------------------------------------------------------


@dataclass
class DetectorBaseline:
    model: ModelSnapshot
    layer_index: int
    mean: np.ndarray
    std: np.ndarray
    accuracy: float
    n_test: int

    def predict(self, feats: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            logits = self.model.net(to_batch((np.asarray(feats, np.float32) - self.mean) / self.std)).numpy()
        return softmax_predict(logits)[0] == 1


def _detector_arch(h: int, w: int, c: int) -> dict:
    arch = {"input_shape": [h, w, c], "num_outputs": 2}
    layers = [{"type": "conv", "name": "conv1", "in": c, "out": 16, "kernel": 3, "padding": 1}, {"type": "relu"}]
    if min(h, w) >= 4:
        layers.append({"type": "maxpool", "size": 2})
        h, w = h // 2, w // 2
    layers += [{"type": "flatten"}, {"type": "dense", "name": "fc1", "in": h * w * 16, "out": 32},
               {"type": "relu"}, {"type": "dense", "name": "fc2", "in": 32, "out": 2}]
    arch["layers"] = layers
    return arch


def detector_baseline_train(clean: np.ndarray, adversarial: np.ndarray, layer_index: int = -1,
                            hyper: TrainSettings | None = None, test_fraction: float = 0.25,
                            clean_test: np.ndarray | None = None,
                            adversarial_test: np.ndarray | None = None) -> DetectorBaseline:
    """Binary clean-vs-adversarial classifier on one layer's (N, H, W, C) activations.

    Without explicit test arrays, a seeded ``test_fraction`` of pair indices is
    held out (the same indices from both classes when the arrays are paired).
    """
    hyper = hyper or TrainSettings(lr=0.01, epochs=30, batch_size=32)
    clean = np.asarray(clean, np.float32)
    adversarial = np.asarray(adversarial, np.float32)
    if len(clean) == 0 or len(adversarial) == 0:
        raise ValidationError("detector needs both clean and adversarial examples")
    if clean_test is None:
        rng = np.random.default_rng(hyper.seed)
        n = min(len(clean), len(adversarial))
        perm = rng.permutation(n)
        n_test = max(1, int(round(test_fraction * n)))
        te, tr = perm[:n_test], perm[n_test:]
        clean_test, adversarial_test = clean[te], adversarial[te]
        clean = np.concatenate([clean[tr], clean[n:]])
        adversarial = np.concatenate([adversarial[tr], adversarial[n:]])
    x = np.concatenate([clean, adversarial])
    y = np.concatenate([np.zeros(len(clean), int), np.ones(len(adversarial), int)])
    mean, std = channel_stats(x)
    h, w, c = x.shape[1:]
    model = build_model(_detector_arch(h, w, c), seed=hyper.seed)
    fit(model.net, to_batch((x - mean) / std), torch.from_numpy(y), F.cross_entropy, hyper)
    det = DetectorBaseline(model, layer_index, mean, std, 0.0, 0)
    xt = np.concatenate([clean_test, adversarial_test])
    yt = np.concatenate([np.zeros(len(clean_test), bool), np.ones(len(adversarial_test), bool)])
    det.accuracy = float((det.predict(xt) == yt).mean())
    det.n_test = len(xt)
    return det
