"""Untargeted white-box L-inf attacks (FGSM, BIM, DeepFool) against a
:class:`~afg_lab.classifier.ModelSnapshot`.

The batch functions work on NCHW tensors and are what the pipeline uses; the
per-image functions wrap them and raise instead of recording errors.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .classifier import ModelSnapshot, softmax_predict, to_batch
from .data import DatasetSplit, ImageExample
from .errors import AttackError, FormatError, InputError, ValidationError
from .tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

ATTACKS = ("FGSM", "BIM", "DEEPFOOL")


@dataclass
class AttackConfig:
    name: str = "FGSM"
    epsilon: float = 0.005
    iterations: int = 1
    step_size: float | None = None  # BIM; None means epsilon / 10
    overshoot: float = 0.02  # DeepFool

    def __post_init__(self):
        self.name = self.name.upper()
        if self.name not in ATTACKS:
            raise ValidationError(f"unknown attack {self.name!r}")
        if self.name in ("FGSM", "BIM") and self.epsilon < 0:
            raise ValidationError("epsilon must be non-negative")
        if self.name != "FGSM" and self.iterations < 1:
            raise ValidationError("iterative attacks need iterations >= 1")

    @property
    def step(self) -> float:
        return self.epsilon / 10 if self.step_size is None else self.step_size

    @classmethod
    def defaults(cls, name: str) -> "AttackConfig":
        name = name.upper()
        if name == "BIM":
            return cls("BIM", 0.005, 100)
        if name == "DEEPFOOL":
            return cls("DEEPFOOL", 0.0, 80)
        return cls("FGSM", 0.005, 1)


@dataclass
class AdversarialRecord:
    original: ImageExample
    perturbation: np.ndarray
    adversarial: np.ndarray
    true_label: int
    adv_label: int
    confidence: float
    success: bool
    attack: AttackConfig
    original_pred: int = -1
    error: str | None = None

    @property
    def clean_correct(self) -> bool:
        return self.original_pred == self.true_label


def _input_grad(net, x, y):
    x = x.clone().requires_grad_(True)
    loss = F.cross_entropy(net(x), y, reduction="sum")
    (g,) = torch.autograd.grad(loss, x)
    return g


def _bad_rows(g) -> torch.Tensor:
    return ~torch.isfinite(g).flatten(1).all(dim=1)


def fgsm_batch(net, x, y, eps: float):
    g = _input_grad(net, x, y)
    return torch.clamp(x + eps * torch.sign(g), 0.0, 1.0), _bad_rows(g)


def bim_batch(net, x, y, eps: float, step: float, iterations: int):
    adv = x.clone()
    lo, hi = x - eps, x + eps
    bad = torch.zeros(len(x), dtype=torch.bool)
    for _ in range(iterations):
        g = _input_grad(net, adv, y)
        bad |= _bad_rows(g)
        adv = adv + step * torch.sign(g)
        adv = torch.min(torch.max(adv, lo), hi)
        adv = torch.clamp(adv, 0.0, 1.0)
    return adv, bad


def deepfool_batch(net, x, y, iterations: int, overshoot: float):
    """L-inf DeepFool. Rows already off ``y`` are left untouched.

    Returns (adversarial, flat) where ``flat`` marks rows whose logit
    differences had zero gradient for every candidate class.
    """
    n = len(x)
    r_tot = torch.zeros_like(x)
    adv = x.clone()
    flat = torch.zeros(n, dtype=torch.bool)
    with torch.no_grad():
        active = net(x).argmax(dim=1) == y
    rows = torch.arange(n)
    for _ in range(iterations):
        idx = rows[active & ~flat]
        if len(idx) == 0:
            break
        xa = adv[idx].clone().requires_grad_(True)
        logits = net(xa)
        yy = y[idx]
        k_total = logits.shape[1]
        grads = []
        for k in range(k_total):
            (gk,) = torch.autograd.grad(logits[:, k].sum(), xa, retain_graph=k < k_total - 1)
            grads.append(gk)
        grads = torch.stack(grads, dim=1)  # (b, K, C, H, W)
        g_true = grads[torch.arange(len(idx)), yy]
        w = grads - g_true[:, None]
        f = (logits - logits.gather(1, yy[:, None])).detach()
        wnorm = w.flatten(2).abs().sum(dim=2)
        ratio = f.abs() / wnorm
        ratio[wnorm == 0] = float("inf")
        ratio[torch.arange(len(idx)), yy] = float("inf")
        kstar = ratio.argmin(dim=1)
        sel = torch.arange(len(idx))
        dead = torch.isinf(ratio[sel, kstar])
        flat[idx[dead]] = True
        wk = w[sel, kstar]
        mag = (f[sel, kstar].abs() / wnorm[sel, kstar]).masked_fill(dead, 0.0)
        r_tot[idx] += mag.view(-1, 1, 1, 1) * torch.sign(wk)
        adv[idx] = torch.clamp(x[idx] + (1 + overshoot) * r_tot[idx], 0.0, 1.0)
        with torch.no_grad():
            active[idx] = net(adv[idx]).argmax(dim=1) == yy
    return adv, flat


def run_batch(model: ModelSnapshot, pixels: np.ndarray, labels, cfg: AttackConfig):
    """Attack a batch; returns (adversarial pixels (N, H, W, C), error strings)."""
    x = to_batch(pixels)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    net = model.net
    if cfg.name == "FGSM":
        adv, bad = fgsm_batch(net, x, y, cfg.epsilon)
        errs = ["non-finite gradient" if b else None for b in bad.tolist()]
    elif cfg.name == "BIM":
        adv, bad = bim_batch(net, x, y, cfg.epsilon, cfg.step, cfg.iterations)
        errs = ["non-finite gradient" if b else None for b in bad.tolist()]
    else:
        if model.num_outputs < 2:
            raise AttackError("DeepFool needs at least two classes")
        adv, flat = deepfool_batch(net, x, y, cfg.iterations, cfg.overshoot)
        errs = ["flat logits" if b else None for b in flat.tolist()]
    return adv.detach().permute(0, 2, 3, 1).numpy().copy(), errs


def _records(model, examples, adv_pix, errs, cfg):
    orig_pix = np.stack([ex.pixels for ex in examples])
    with torch.no_grad():
        lo = model.net(to_batch(orig_pix)).numpy()
        la = model.net(to_batch(adv_pix)).numpy()
    opred, _ = softmax_predict(lo)
    apred, aconf = softmax_predict(la)
    out = []
    for i, ex in enumerate(examples):
        adv = adv_pix[i]
        if errs[i] is not None:
            adv = ex.pixels.copy()
        ap = int(apred[i]) if errs[i] is None else int(opred[i])
        out.append(AdversarialRecord(ex, adv - ex.pixels, adv, ex.label, ap, float(aconf[i]),
                                     errs[i] is None and ap != ex.label, cfg, int(opred[i]), errs[i]))
    return out


def _single(model, example: ImageExample, cfg: AttackConfig) -> AdversarialRecord:
    if tuple(example.pixels.shape) != model.input_shape:
        raise InputError(f"image shape {example.pixels.shape} does not match model input {model.input_shape}")
    adv, errs = run_batch(model, example.pixels[None], [example.label], cfg)
    if errs[0] is not None:
        raise AttackError(f"{cfg.name} on {example.uid or 'image'}: {errs[0]}")
    return _records(model, [example], adv, errs, cfg)[0]


def fgsm(model: ModelSnapshot, example: ImageExample, cfg: AttackConfig) -> AdversarialRecord:
    return _single(model, example, AttackConfig("FGSM", cfg.epsilon, 1))


def bim(model: ModelSnapshot, example: ImageExample, cfg: AttackConfig) -> AdversarialRecord:
    return _single(model, example, AttackConfig("BIM", cfg.epsilon, cfg.iterations, cfg.step_size))


def deepfool(model: ModelSnapshot, example: ImageExample, cfg: AttackConfig) -> AdversarialRecord:
    return _single(model, example, AttackConfig("DEEPFOOL", cfg.epsilon, cfg.iterations,
                                                 overshoot=cfg.overshoot))


def attack_dataset(model: ModelSnapshot, data, cfg: AttackConfig, batch_size: int = 64) -> list[AdversarialRecord]:
    """One record per input image (train then test for a split).

    Per-image failures are stored on the record instead of aborting.
    """
    examples = data.train + data.test if isinstance(data, DatasetSplit) else list(data)
    records = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        pix = np.stack([ex.pixels for ex in chunk])
        adv, errs = run_batch(model, pix, [ex.label for ex in chunk], cfg)
        records += _records(model, chunk, adv, errs, cfg)
    summary = success_summary(records)
    budget = f"{cfg.iterations} iters" if cfg.name == "DEEPFOOL" else f"eps={cfg.epsilon:g}"
    log.info("%s %s: %d/%d successful on correctly classified inputs (%d errors)", cfg.name,
             budget, summary["n_success"], summary["n_correct"], summary["n_errors"])
    return records


def success_summary(records: list[AdversarialRecord]) -> dict:
    correct = [r for r in records if r.clean_correct]
    n_success = sum(r.success for r in correct)
    return {"n": len(records), "n_correct": len(correct), "n_success": n_success,
            "n_errors": sum(r.error is not None for r in records),
            "success_rate": n_success / len(correct) if correct else 0.0}


def save_records(records: list[AdversarialRecord], out_dir) -> Path:
    """``attacks.json`` plus one (2, H, W, C) tensor file [original, adversarial] per record."""
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, r in enumerate(records):
        fname = f"records/{i:06d}.afg"
        write_tensor(out / fname, np.stack([r.original.pixels, r.adversarial]))
        rows.append({"file": fname, "uid": r.original.uid, "true_label": r.true_label,
                     "adv_label": r.adv_label, "original_pred": r.original_pred,
                     "confidence": r.confidence, "success": r.success, "error": r.error})
    cfg = asdict(records[0].attack) if records else {}
    manifest = {"attack": cfg, "summary": success_summary(records), "records": rows}
    path = out / "attacks.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_records(out_dir) -> list[AdversarialRecord]:
    out = Path(out_dir)
    path = out / "attacks.json"
    if not path.exists():
        raise InputError(f"missing attack manifest {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    cfg = AttackConfig(**manifest["attack"]) if manifest["attack"] else AttackConfig()
    records = []
    for row in manifest["records"]:
        pair = read_tensor(out / row["file"])
        if pair.shape[0] != 2:
            raise FormatError(f"{row['file']}: expected an [original, adversarial] pair")
        ex = ImageExample(pair[0], row["true_label"], row["uid"])
        records.append(AdversarialRecord(ex, pair[1] - pair[0], pair[1], row["true_label"], row["adv_label"],
                                         row["confidence"], row["success"], cfg, row["original_pred"],
                                         row["error"]))
    return records
