"""Per-layer feature separability between clean inputs and their perturbed
counterparts: relative Euclidean distance and KL divergence of channel mass.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import ModelSnapshot, batch_features
from .errors import DegenerateError, FormatError, ValidationError

DELTA = 1e-8


@dataclass
class LayerDistanceCurve:
    layer_names: list[str]
    mean_distance: list[float]
    mean_kl: list[float]
    n_pairs: int
    attack: str = ""

    def depth_ratio(self, metric: str = "distance") -> float:
        vals = self.mean_distance if metric == "distance" else self.mean_kl
        return vals[-1] / vals[0] if vals[0] > 0 else float("inf")


@dataclass
class ChannelDistribution:
    mass: np.ndarray


def layer_distance(p, p_hat) -> float:
    """||p - p_hat|| / ||p|| over all elements."""
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p.shape != p_hat.shape:
        raise ValidationError(f"shape mismatch {p.shape} vs {p_hat.shape}")
    ref = np.linalg.norm(p)
    if ref == 0:
        raise DegenerateError("reference feature maps have zero norm")
    return float(np.linalg.norm(p - p_hat) / ref)


def _channel_sums(p: np.ndarray) -> np.ndarray:
    if np.any(p < 0):
        raise ValidationError("negative activations: pass post-activation (rectified) feature maps")
    return p.reshape(-1, p.shape[-1]).sum(axis=0)


def _mass(sums: np.ndarray, delta: float) -> np.ndarray:
    total = sums.sum(axis=-1, keepdims=True)
    if np.any(total == 0):
        raise DegenerateError("feature maps are all zero")
    return (sums + delta) / (total + sums.shape[-1] * delta)


def channel_distribution(p, delta: float = DELTA) -> ChannelDistribution:
    """Share of total activation held by each channel (last axis), smoothed by ``delta``."""
    p = np.asarray(p, dtype=np.float64)
    return ChannelDistribution(_mass(_channel_sums(p), delta))


def kl_divergence(p, p_hat, delta: float = DELTA) -> float:
    """KL(mu(p) || mu(p_hat)) in nats; ``p`` is the clean reference."""
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p.shape != p_hat.shape:
        raise ValidationError(f"shape mismatch {p.shape} vs {p_hat.shape}")
    mu = channel_distribution(p, delta).mass
    nu = channel_distribution(p_hat, delta).mass
    return float(_kl_rows(mu[None], nu[None])[0])


def _kl_rows(mu: np.ndarray, nu: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(mu > 0, mu * np.log(mu / nu), 0.0)
    return terms.sum(axis=-1)


def pair_metrics(feats_a: list[np.ndarray], feats_b: list[np.ndarray], delta: float = DELTA):
    """Per-layer (N_pairs,) arrays of distance and KL for batched channel-last features."""
    dists, kls = [], []
    for a, b in zip(feats_a, feats_b):
        a = a.reshape(len(a), -1, a.shape[-1]).astype(np.float64)
        b = b.reshape(len(b), -1, b.shape[-1]).astype(np.float64)
        if np.any(a < 0) or np.any(b < 0):
            raise ValidationError("negative activations: pass post-activation (rectified) feature maps")
        ref = np.sqrt((a ** 2).sum(axis=(1, 2)))
        if np.any(ref == 0):
            raise DegenerateError(f"{int((ref == 0).sum())} reference inputs have an all-zero layer")
        dists.append(np.sqrt(((a - b) ** 2).sum(axis=(1, 2))) / ref)
        kls.append(_kl_rows(_mass(a.sum(axis=1), delta), _mass(b.sum(axis=1), delta)))
    return dists, kls


def curve_from_pairs(model: ModelSnapshot, originals: np.ndarray, perturbed: np.ndarray,
                     attack: str = "", delta: float = DELTA) -> LayerDistanceCurve:
    if len(originals) == 0:
        raise ValidationError("no pairs to measure")
    dists, kls = pair_metrics(batch_features(model, originals), batch_features(model, perturbed), delta)
    return LayerDistanceCurve(model.layer_names, [float(d.mean()) for d in dists],
                              [float(k.mean()) for k in kls], len(originals), attack)


def successful(records) -> list:
    return [r for r in records if r.success and r.error is None]


def afs_curve(model: ModelSnapshot, records, delta: float = DELTA) -> LayerDistanceCurve:
    """Mean per-layer metrics over the given (successful) attack records."""
    if not records:
        raise ValidationError("afs_curve needs at least one record")
    orig = np.stack([r.original.pixels for r in records])
    adv = np.stack([r.adversarial for r in records])
    return curve_from_pairs(model, orig, adv, records[0].attack.name, delta)


def noise_control_curve(model: ModelSnapshot, records, seed: int = 0, delta: float = DELTA) -> LayerDistanceCurve:
    """Same measurement with each perturbation replaced by uniform noise of equal L-inf size."""
    if not records:
        raise ValidationError("noise control needs at least one record")
    rng = np.random.default_rng(seed)
    orig = np.stack([r.original.pixels for r in records])
    bound = np.array([np.abs(r.perturbation).max() for r in records], dtype=np.float32)
    noise = rng.uniform(-1.0, 1.0, size=orig.shape).astype(np.float32) * bound[:, None, None, None]
    return curve_from_pairs(model, orig, np.clip(orig + noise, 0, 1), "uniform-noise", delta)


CSV_HEADER = ["layer", "mean_distance", "mean_kl", "n_pairs"]


def write_curve_csv(curve: LayerDistanceCurve, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for name, d, k in zip(curve.layer_names, curve.mean_distance, curve.mean_kl):
            w.writerow([name, repr(d), repr(k), curve.n_pairs])
    return path


def read_curve_csv(path, attack: str = "") -> LayerDistanceCurve:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise FormatError(f"{path}: expected header {','.join(CSV_HEADER)}")
    try:
        body = [(r[0], float(r[1]), float(r[2]), int(r[3])) for r in rows[1:]]
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed row") from exc
    return LayerDistanceCurve([b[0] for b in body], [b[1] for b in body], [b[2] for b in body],
                              body[0][3] if body else 0, attack)
