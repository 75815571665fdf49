"""Adversarial feature genomes: stitched per-layer group features stacked
into a (G, G, N) tensor, paired with a mixed label.

A mixed label concatenates a one-hot original class and a one-hot
misclassified class; clean inputs carry an all-zero second half. With three
classes, class 2 pushed to class 0 is ``"001" + "100"`` and a clean class 1
input is ``"010" + "000"``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import ModelSnapshot, batch_features
from .errors import (ConfigurationError, DegenerateError, FormatError, InputError, IntegrityError,
                     ValidationError)
from .groupviz import AscentOptions, NMFOptions, ascend_batch, nmf_batch, order_groups
from .tensorio import decode_tensor, encode_tensor

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
POLICIES = ("ALL", "F3", "L3", "F3L3", "FML")


# --- labels -----------------------------------------------------------------

@dataclass(frozen=True)
class MixedLabel:
    original_onehot: tuple[int, ...]
    adversarial_onehot: tuple[int, ...]

    @property
    def code(self) -> str:
        return "".join(map(str, self.original_onehot + self.adversarial_onehot))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.original_onehot + self.adversarial_onehot, dtype=np.float32)

    @property
    def original(self) -> int:
        return self.original_onehot.index(1)

    @property
    def adversarial(self) -> int | None:
        return self.adversarial_onehot.index(1) if 1 in self.adversarial_onehot else None

    @property
    def is_adversarial(self) -> bool:
        return 1 in self.adversarial_onehot

    @classmethod
    def from_code(cls, code: str, k_orig: int, k_adv: int | None = None) -> "MixedLabel":
        k_adv = k_orig if k_adv is None else k_adv
        if len(code) != k_orig + k_adv or set(code) - {"0", "1"}:
            raise FormatError(f"bad label code {code!r} for {k_orig}+{k_adv} classes")
        bits = tuple(int(ch) for ch in code)
        lab = cls(bits[:k_orig], bits[k_orig:])
        if sum(lab.original_onehot) != 1 or sum(lab.adversarial_onehot) > 1:
            raise FormatError(f"label code {code!r} is not one-hot")
        return lab


def _onehot(i: int | None, k: int) -> tuple[int, ...]:
    return tuple(int(i == c) for c in range(k))


def encode_mixed_label(y: int, y_hat: int | None, k_orig: int, k_adv: int | None = None) -> MixedLabel:
    """``y_hat=None`` marks a clean input. The adversarial vocabulary defaults
    to the original one (total width twice the class count); only then does
    ``y_hat == y`` mean the input was not actually misclassified."""
    k_adv = k_orig if k_adv is None else k_adv
    if not 0 <= y < k_orig:
        raise ValidationError(f"original class {y} outside [0, {k_orig})")
    if y_hat is not None:
        if not 0 <= y_hat < k_adv:
            raise ValidationError(f"adversarial class {y_hat} outside [0, {k_adv})")
        if y_hat == y and k_adv == k_orig:
            raise ValidationError(f"adversarial class equals original class {y}: not an adversarial example")
    return MixedLabel(_onehot(y, k_orig), _onehot(y_hat, k_adv))


def decode_label(label: MixedLabel) -> tuple[int, int | None]:
    return label.original, label.adversarial


def decode_prediction(scores, k_orig: int, tau: float = 0.5) -> tuple[int, int | None]:
    """Split-part decode: argmax of the original half; argmax of the
    adversarial half only if it reaches ``tau``. Ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    orig = int(np.argmax(scores[:k_orig]))
    adv_part = scores[k_orig:]
    a = int(np.argmax(adv_part))
    return orig, (a if adv_part[a] >= tau else None)


# --- channel policies ---------------------------------------------------------

@dataclass(frozen=True)
class ChannelPolicy:
    name: str
    indices: tuple[int, ...]


def resolve_policy(name: str, n: int) -> ChannelPolicy:
    name = name.upper()
    if name == "ALL":
        idx = range(n)
    elif name == "F3":
        need, idx = 3, [0, 1, 2]
    elif name == "L3":
        need, idx = 3, [n - 3, n - 2, n - 1]
    elif name == "F3L3":
        need, idx = 6, [0, 1, 2, n - 3, n - 2, n - 1]
    elif name == "FML":
        need, idx = 3, [0, n // 2, n - 1]
    else:
        raise ConfigurationError(f"unknown channel policy {name!r}; choose from {', '.join(POLICIES)}")
    if name != "ALL" and n < need:
        raise ConfigurationError(f"policy {name} needs at least {need} layers, AFG has {n}")
    return ChannelPolicy(name, tuple(idx))


# --- tensors --------------------------------------------------------------------

@dataclass
class AFGConfig:
    r: int = 4
    nmf: NMFOptions = field(default_factory=NMFOptions)
    ascent: AscentOptions = field(default_factory=AscentOptions)

    @property
    def grid(self) -> int:
        side = math.isqrt(self.r)
        if side * side != self.r:
            raise ConfigurationError(f"r={self.r} is not a perfect square; tiles cannot form a square grid")
        return side


@dataclass
class AFG:
    tensor: np.ndarray
    label: MixedLabel | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def num_channels(self) -> int:
        return self.tensor.shape[-1]


def stitch(groups) -> np.ndarray:
    """Place r square tiles on a sqrt(r) x sqrt(r) grid, row-major from top-left."""
    tiles = [np.asarray(g.pixels if hasattr(g, "pixels") else g) for g in groups]
    side = math.isqrt(len(tiles))
    if not tiles or side * side != len(tiles):
        raise ConfigurationError(f"r={len(tiles)} is not a perfect square")
    shapes = {t.shape for t in tiles}
    if len(shapes) != 1:
        raise ValidationError(f"mixed tile shapes {sorted(shapes)}")
    rows = [np.concatenate(tiles[i * side:(i + 1) * side], axis=1) for i in range(side)]
    return np.concatenate(rows, axis=0)


def to_luminance(pixels: np.ndarray) -> np.ndarray:
    """(..., C) -> (...): identity for one channel, Rec. 601 luma for RGB, mean otherwise."""
    c = pixels.shape[-1]
    if c == 1:
        return pixels[..., 0]
    if c == 3:
        return np.clip(pixels @ LUMA, 0.0, 1.0)
    return pixels.mean(axis=-1)


def build_afg_batch(model: ModelSnapshot, pixels: np.ndarray, cfg: AFGConfig | None = None,
                    progress=None) -> np.ndarray:
    """AFG tensors (B, G, G, N) for a batch of images."""
    cfg = cfg or AFGConfig()
    side = cfg.grid
    s = model.input_shape[0]
    b = len(pixels)
    out = np.zeros((b, s * side, s * side, model.num_layers), dtype=np.float32)
    if b == 0:
        return out
    feats = batch_features(model, pixels)
    for li, f in enumerate(feats):
        mats = f.reshape(b, -1, f.shape[-1])
        dead = np.flatnonzero(~mats.any(axis=(1, 2)))
        if len(dead):
            raise DegenerateError(f"layer {li} ({model.layer_names[li]}) is dead for batch items {dead.tolist()}")
        if np.any(mats < 0):
            raise ValidationError(f"layer {li}: negative activations, NMF needs rectified feature maps")
        U, V, _, _ = nmf_batch(mats, cfg.r, cfg.nmf)
        _, V = order_groups(U, V)
        dirs = V.reshape(b * cfg.r, -1)
        gids = np.tile(np.arange(cfg.r), b)
        tiles = np.empty((b * cfg.r, s, s), dtype=np.float32)
        for i in range(0, len(dirs), cfg.ascent.chunk):
            pix, _, _ = ascend_batch(model, li, dirs[i:i + cfg.ascent.chunk], gids[i:i + cfg.ascent.chunk],
                                     cfg.ascent)
            tiles[i:i + len(pix)] = to_luminance(pix)
        tiles = tiles.reshape(b, side, side, s, s)
        out[..., li] = tiles.transpose(0, 1, 3, 2, 4).reshape(b, s * side, s * side)
        if progress:
            progress(li)
    return out


def build_afg(model: ModelSnapshot, image, cfg: AFGConfig | None = None) -> AFG:
    """Unlabelled AFG for one image."""
    pix = image.pixels if hasattr(image, "pixels") else np.asarray(image, dtype=np.float32)
    if tuple(pix.shape) != model.input_shape:
        raise InputError(f"image shape {pix.shape} does not match model input {model.input_shape}")
    tensor = build_afg_batch(model, pix[None], cfg)[0]
    return AFG(tensor, None, {"uid": getattr(image, "uid", "")})


def select_channels(a: AFG, policy: ChannelPolicy | str) -> AFG:
    if isinstance(policy, str):
        policy = resolve_policy(policy, a.num_channels)
    if policy.indices and max(policy.indices) >= a.num_channels:
        raise ConfigurationError(f"policy {policy.name} indices {policy.indices} exceed {a.num_channels} channels")
    prov = dict(a.provenance, policy=policy.name)
    return AFG(a.tensor[..., list(policy.indices)], a.label, prov)


# --- dataset container -----------------------------------------------------------

def write_afg_dataset(path, items: list[AFG], config: dict | None = None) -> Path:
    """``manifest.json`` plus ``samples/<id>.afg`` per item."""
    root = Path(path)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, a in enumerate(items):
        sid = f"{i:06d}"
        (root / "samples" / f"{sid}.afg").write_bytes(encode_tensor(a.tensor))
        lab = a.label
        rows.append({"id": sid, "code": lab.code if lab else None,
                     "original": lab.original if lab else None,
                     "adversarial": lab.adversarial if lab else None,
                     "k_orig": len(lab.original_onehot) if lab else None,
                     "k_adv": len(lab.adversarial_onehot) if lab else None,
                     "provenance": a.provenance})
    manifest = {"count": len(rows), "config": config or {}, "samples": rows}
    out = root / "manifest.json"
    out.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return out


def read_afg_dataset(path) -> tuple[list[AFG], dict]:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise InputError(f"missing AFG manifest {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    rows = manifest["samples"]
    files = sorted((root / "samples").glob("*.afg")) if (root / "samples").exists() else []
    if manifest["count"] != len(rows) or len(files) != len(rows):
        raise IntegrityError(f"{root}: manifest count {manifest['count']}, rows {len(rows)}, files {len(files)}")
    items = []
    for row in rows:
        f = root / "samples" / f"{row['id']}.afg"
        if not f.exists():
            raise IntegrityError(f"sample {row['id']}: file missing")
        tensor = decode_tensor(f.read_bytes(), f"sample {row['id']}")
        label = MixedLabel.from_code(row["code"], row["k_orig"], row["k_adv"]) if row["code"] else None
        items.append(AFG(tensor, label, row["provenance"]))
    return items, manifest.get("config", {})


def dataset_hash(path) -> str:
    """SHA-256 over the manifest and every sample file in id order."""
    import hashlib

    root = Path(path)
    h = hashlib.sha256((root / "manifest.json").read_bytes())
    for f in sorted((root / "samples").glob("*.afg")):
        h.update(f.read_bytes())
    return h.hexdigest()
