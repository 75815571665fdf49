"""First classifier: a configurable conv/dense network with per-conv-layer
feature capture and a self-describing snapshot file.

Architectures are plain dicts so they serialize into the snapshot header::

    {"input_shape": [32, 32, 3], "num_outputs": 10, "layers": [
        {"type": "conv", "name": "conv1", "in": 3, "out": 16, "kernel": 3, "padding": 1},
        {"type": "relu"}, {"type": "maxpool", "size": 2}, ...,
        {"type": "flatten"}, {"type": "dense", "name": "fc1", "in": 1024, "out": 64}, ...]}

Feature maps are captured after the activation that follows each conv layer
(or straight from the conv when no activation follows), channel-last.
"""
from __future__ import annotations

import copy
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError, InputError, IntegrityError, TrainingError, ValidationError

SNAPSHOT_MAGIC = b"AFGM"
SNAPSHOT_VERSION = 1


def default_arch(input_shape=(32, 32, 3), num_outputs=10, widths=(16, 32, 32, 64), hidden=64,
                 pool_after=(True, True, True, False), bias=True) -> dict:
    """Four 3x3 conv layers with ReLU, 2x2 max-pooling between, two dense layers."""
    h, w, c = input_shape
    layers = []
    for i, (out, pool) in enumerate(zip(widths, pool_after)):
        layers += [{"type": "conv", "name": f"conv{i + 1}", "in": c, "out": out, "kernel": 3,
                    "padding": 1, "stride": 1, "bias": bias}, {"type": "relu"}]
        c = out
        if pool:
            layers.append({"type": "maxpool", "size": 2})
            h, w = h // 2, w // 2
    layers += [{"type": "flatten"},
               {"type": "dense", "name": "fc1", "in": h * w * c, "out": hidden, "bias": bias},
               {"type": "relu"},
               {"type": "dense", "name": "fc2", "in": hidden, "out": num_outputs, "bias": bias}]
    return {"input_shape": list(input_shape), "num_outputs": num_outputs, "layers": layers}


def _check_arch(arch: dict) -> None:
    """Walk the layer list propagating shapes; raise on the first mismatch."""
    h, w, c = arch["input_shape"]
    flat = None
    prev = "input"
    for i, spec in enumerate(arch["layers"]):
        kind = spec["type"]
        name = spec.get("name", f"{kind}{i}")
        if kind == "conv":
            if flat is not None:
                raise ValidationError(f"{name}: conv after flatten")
            if spec["in"] != c:
                raise ValidationError(f"{name} expects {spec['in']} input channels but {prev} produces {c}")
            k, s, p = spec["kernel"], spec.get("stride", 1), spec.get("padding", 0)
            h, w = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
            if h < 1 or w < 1:
                raise ValidationError(f"{name}: spatial size collapses to {h}x{w}")
            c = spec["out"]
            prev = name
        elif kind == "maxpool":
            h, w = h // spec["size"], w // spec["size"]
            if h < 1 or w < 1:
                raise ValidationError(f"{name}: spatial size collapses to {h}x{w}")
        elif kind == "flatten":
            flat = h * w * c
        elif kind == "dense":
            width = flat if flat is not None else None
            if width is None:
                raise ValidationError(f"{name}: dense layer needs a flatten before it")
            if spec["in"] != width:
                raise ValidationError(f"{name} expects {spec['in']} inputs but {prev} produces {width}")
            flat = spec["out"]
            prev = name
        elif kind not in ("relu",):
            raise ValidationError(f"unknown layer type {kind!r}")
    if flat != arch["num_outputs"]:
        raise ValidationError(f"final layer {prev} produces {flat} outputs, arch declares {arch['num_outputs']}")


class ConvNet(nn.Module):
    def __init__(self, arch: dict):
        super().__init__()
        self.specs = arch["layers"]
        mods = []
        for spec in self.specs:
            kind = spec["type"]
            if kind == "conv":
                mods.append(nn.Conv2d(spec["in"], spec["out"], spec["kernel"], stride=spec.get("stride", 1),
                                      padding=spec.get("padding", 0), bias=spec.get("bias", True)))
            elif kind == "dense":
                mods.append(nn.Linear(spec["in"], spec["out"], bias=spec.get("bias", True)))
            elif kind == "relu":
                mods.append(nn.ReLU())
            elif kind == "maxpool":
                mods.append(nn.MaxPool2d(spec["size"]))
            elif kind == "flatten":
                mods.append(_ChannelLastFlatten())
        self.mods = nn.ModuleList(mods)
        # index of the module whose output is captured for each conv layer
        self.capture_at = []
        for i, spec in enumerate(self.specs):
            if spec["type"] == "conv":
                nxt = self.specs[i + 1]["type"] if i + 1 < len(self.specs) else None
                self.capture_at.append(i + 1 if nxt == "relu" else i)

    def forward(self, x):
        for m in self.mods:
            x = m(x)
        return x

    def forward_capture(self, x):
        feats = []
        marks = set(self.capture_at)
        for i, m in enumerate(self.mods):
            x = m(x)
            if i in marks:
                feats.append(x)
        return x, feats

    def forward_until(self, x, layer_index: int):
        stop = self.capture_at[layer_index]
        for m in self.mods[: stop + 1]:
            x = m(x)
        return x

    def forward_from(self, layer_index: int, act):
        for m in self.mods[self.capture_at[layer_index] + 1:]:
            act = m(act)
        return act

    def all_outputs(self, x):
        outs = []
        for m in self.mods:
            x = m(x)
            outs.append(x)
        return outs


class _ChannelLastFlatten(nn.Module):
    """Flatten NCHW in (H, W, C) order so dense weights match channel-last feature dumps."""

    def forward(self, x):
        if x.dim() == 4:
            x = x.permute(0, 2, 3, 1)
        return x.reshape(x.shape[0], -1)


def _init_weights(net: ConvNet, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in net.mods:
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = math.sqrt(6.0 / fan_in)
                m.weight.copy_(torch.rand(m.weight.shape, generator=gen) * 2 * bound - bound)
                if m.bias is not None:
                    m.bias.zero_()


@dataclass
class ModelSnapshot:
    arch: dict
    net: ConvNet
    meta: dict = field(default_factory=dict)

    @property
    def layer_names(self) -> list[str]:
        return [s["name"] for s in self.arch["layers"] if s["type"] == "conv"]

    @property
    def num_layers(self) -> int:
        return len(self.layer_names)

    @property
    def num_outputs(self) -> int:
        return self.arch["num_outputs"]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.arch["input_shape"])

    def copy(self) -> "ModelSnapshot":
        return ModelSnapshot(copy.deepcopy(self.arch), copy.deepcopy(self.net), copy.deepcopy(self.meta))

    def checksum(self) -> int:
        crc = 0
        for t in self.net.state_dict().values():
            crc = zlib.crc32(t.detach().numpy().astype("<f4").tobytes(), crc)
        return crc


def build_model(arch: dict, seed: int = 0) -> ModelSnapshot:
    arch = copy.deepcopy(arch)
    _check_arch(arch)
    net = ConvNet(arch)
    _init_weights(net, seed)
    net.eval()
    return ModelSnapshot(arch, net, {"seed": seed, "epochs": 0})


def to_batch(pixels) -> torch.Tensor:
    """(N, H, W, C) or (H, W, C) numpy -> float32 NCHW tensor."""
    arr = np.asarray(pixels, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _pixels(image) -> np.ndarray:
    return image.pixels if hasattr(image, "pixels") else np.asarray(image, dtype=np.float32)


def _check_input(model: ModelSnapshot, arr: np.ndarray) -> None:
    if tuple(arr.shape[-3:]) != model.input_shape:
        raise InputError(f"image shape {tuple(arr.shape[-3:])} does not match model input {model.input_shape}")


@dataclass
class FeatureStack:
    per_layer: list[np.ndarray]
    input_ref: str = ""


def forward_with_features(model: ModelSnapshot, image) -> tuple[np.ndarray, FeatureStack]:
    arr = _pixels(image)
    _check_input(model, arr)
    with torch.no_grad():
        logits, feats = model.net.forward_capture(to_batch(arr))
    stack = [f[0].permute(1, 2, 0).numpy().copy() if f.dim() == 4 else f[0].numpy().copy() for f in feats]
    return logits[0].numpy().copy(), FeatureStack(stack, getattr(image, "uid", ""))


def batch_features(model: ModelSnapshot, pixels: np.ndarray, batch_size: int = 256):
    """Channel-last feature maps for a batch: list over layers of (N, H, W, C) arrays."""
    _check_input(model, pixels)
    per_layer = [[] for _ in range(model.num_layers)]
    with torch.no_grad():
        for i in range(0, len(pixels), batch_size):
            _, feats = model.net.forward_capture(to_batch(pixels[i:i + batch_size]))
            for k, f in enumerate(feats):
                per_layer[k].append(f.permute(0, 2, 3, 1).numpy())
    return [np.concatenate(p) for p in per_layer]


def logits_batch(model: ModelSnapshot, pixels: np.ndarray, batch_size: int = 256) -> np.ndarray:
    _check_input(model, pixels)
    out = []
    with torch.no_grad():
        for i in range(0, len(pixels), batch_size):
            out.append(model.net(to_batch(pixels[i:i + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.num_outputs), np.float32)


def softmax_predict(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class = argmax (first index on ties) of the softmax; confidence = its entry."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    cls = p.argmax(axis=-1)
    return cls, np.take_along_axis(p, cls[..., None], axis=-1)[..., 0]


def predict(model: ModelSnapshot, image) -> tuple[int, float]:
    arr = _pixels(image)
    _check_input(model, arr)
    with torch.no_grad():
        logits = model.net(to_batch(arr))[0].numpy()
    cls, conf = softmax_predict(logits)
    return int(cls), float(conf)


@dataclass
class TrainSettings:
    lr: float = 0.001
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    weight_decay: float = 0.0
    seed: int = 0


def accuracy(model: ModelSnapshot, examples) -> float:
    if not examples:
        return float("nan")
    pix = np.stack([ex.pixels for ex in examples])
    labels = np.array([ex.label for ex in examples])
    cls, _ = softmax_predict(logits_batch(model, pix))
    return float((cls == labels).mean())


def fit(net: nn.Module, x: torch.Tensor, y: torch.Tensor, loss_fn, hyper: TrainSettings,
        log=None) -> list[float]:
    """Minibatch SGD with momentum; returns the per-epoch mean training loss."""
    opt = torch.optim.SGD(net.parameters(), lr=hyper.lr, momentum=hyper.momentum,
                          weight_decay=hyper.weight_decay)
    gen = torch.Generator().manual_seed(hyper.seed)
    losses = []
    net.train()
    for epoch in range(hyper.epochs):
        order = torch.randperm(len(x), generator=gen)
        total = 0.0
        for i in range(0, len(x), hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            opt.zero_grad()
            loss = loss_fn(net(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(x))
        if log:
            log(epoch, losses[-1])
    net.eval()
    return losses


def train(model: ModelSnapshot, data, hyper: TrainSettings | None = None, log=None) -> ModelSnapshot:
    """Train a copy of ``model`` on ``data.train`` with cross-entropy."""
    hyper = hyper or TrainSettings()
    labels = [ex.label for ex in data.train]
    if labels and max(labels) >= model.num_outputs:
        raise ValidationError(f"label {max(labels)} exceeds model output width {model.num_outputs}")
    out = model.copy()
    if hyper.epochs == 0:
        return out
    x = to_batch(np.stack([ex.pixels for ex in data.train]))
    y = torch.tensor(labels)
    losses = fit(out.net, x, y, F.cross_entropy, hyper, log)
    out.meta.update({"seed": hyper.seed, "epochs": model.meta.get("epochs", 0) + hyper.epochs,
                     "lr": hyper.lr, "losses": losses,
                     "train_accuracy": accuracy(out, data.train),
                     "test_accuracy": accuracy(out, data.test)})
    return out


# --- snapshot file ----------------------------------------------------------

def encode_snapshot(model: ModelSnapshot, tag: dict | None = None) -> bytes:
    state = model.net.state_dict()
    header = {"arch": model.arch, "meta": model.meta, "tag": tag or {},
              "tensors": [[k, list(v.shape)] for k, v in state.items()]}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray(SNAPSHOT_MAGIC + struct.pack("<HI", SNAPSHOT_VERSION, len(hb)) + hb)
    for v in state.values():
        body += v.detach().numpy().astype("<f4").tobytes()
    return bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode_snapshot(buf: bytes, name: str = "<buffer>") -> tuple[ModelSnapshot, dict]:
    if len(buf) < 14 or buf[:4] != SNAPSHOT_MAGIC:
        raise FormatError(f"{name}: not a model snapshot (bad magic or truncated)")
    version, hlen = struct.unpack("<HI", buf[4:10])
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"{name}: snapshot version {version}, expected {SNAPSHOT_VERSION}")
    if len(buf) < 10 + hlen + 4:
        raise FormatError(f"{name}: truncated header")
    try:
        header = json.loads(buf[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{name}: corrupt header") from exc
    off = 10 + hlen
    need = sum(4 * int(np.prod(shape)) for _, shape in header["tensors"])
    if len(buf) != off + need + 4:
        raise FormatError(f"{name}: expected {off + need + 4} bytes, found {len(buf)}")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise IntegrityError(f"{name}: CRC mismatch")
    state = {}
    for key, shape in header["tensors"]:
        n = int(np.prod(shape))
        state[key] = torch.from_numpy(np.frombuffer(buf[off:off + 4 * n], dtype="<f4").reshape(shape).copy())
        off += 4 * n
    _check_arch(header["arch"])
    net = ConvNet(header["arch"])
    net.load_state_dict(state)
    net.eval()
    return ModelSnapshot(header["arch"], net, header["meta"]), header["tag"]


def save_snapshot(model: ModelSnapshot, path, tag: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_snapshot(model, tag))
    return path


def load_snapshot(path) -> ModelSnapshot:
    path = Path(path)
    return decode_snapshot(path.read_bytes(), str(path))[0]
