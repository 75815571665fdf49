"""Group features: factor a layer's rectified feature maps with NMF and
render each group's channel direction by activation maximization.

The group objective for a candidate input ``x`` and group ``j`` is the
activation of layer ``i`` projected onto the group's channel weights::

    h_ij(x) = sum_{pixel, c} P_i(x)[pixel, c] * V[j, c] / ||V[j]||_1
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .classifier import ModelSnapshot, forward_with_features
from .errors import DegenerateError, InputError, OptimizationError, ValidationError

_TINY = 1e-12


@dataclass
class GroupFactorization:
    layer_index: int
    U: np.ndarray
    V: np.ndarray
    reconstruction_error: float
    history: list[float] = field(default_factory=list)

    @property
    def r(self) -> int:
        return self.V.shape[0]


@dataclass
class GroupFeature:
    layer_index: int
    group_index: int
    pixels: np.ndarray
    final_objective: float
    history: list[float] = field(default_factory=list)


@dataclass
class NMFOptions:
    iters: int = 200
    tol: float = 1e-5
    seed: int = 0


@dataclass
class AscentOptions:
    steps: int = 256
    step_size: float = 0.05
    init_low: float = 0.45
    init_high: float = 0.55
    jitter: int = 0
    seed: int = 0
    chunk: int = 256


def flatten_nonneg(p) -> np.ndarray:
    """(H, W, C) rectified maps -> (H*W, C); column c is map c unrolled row-major."""
    p = np.asarray(p)
    if p.ndim != 3:
        raise InputError(f"expected (H, W, C) feature maps, got shape {p.shape}")
    if np.any(p < 0):
        raise ValidationError("negative activations: NMF needs post-activation feature maps")
    return p.reshape(-1, p.shape[-1])


def _init_factors(n: int, c: int, r: int, scale: float, seed: int):
    rng = np.random.default_rng(seed)
    U = rng.uniform(0.01, 1.0, size=(n, r)) * scale
    V = rng.uniform(0.01, 1.0, size=(r, c)) * scale
    return U, V


def nmf_batch(ms: np.ndarray, r: int, opts: NMFOptions | None = None, keep_history: bool = False):
    """Lee-Seung multiplicative updates for a stack of (n, c) matrices.

    Each matrix stops independently once its relative error improves by less
    than ``tol`` (relative to the previous error). Returns (U, V, errors,
    histories) with U (B, n, r), V (B, r, c).
    """
    opts = opts or NMFOptions()
    ms = np.asarray(ms, dtype=np.float64)
    b, n, c = ms.shape
    if not 1 <= r <= min(n, c):
        raise ValidationError(f"rank r={r} outside [1, {min(n, c)}]")
    if np.any(ms < 0):
        raise ValidationError("NMF input must be non-negative")
    norms = np.sqrt((ms ** 2).sum(axis=(1, 2)))
    if np.any(norms == 0):
        raise DegenerateError("all-zero matrix cannot be factorized")
    U = np.empty((b, n, r))
    V = np.empty((b, r, c))
    for k in range(b):
        scale = math.sqrt(ms[k].mean() / r)
        U[k], V[k] = _init_factors(n, c, r, scale, opts.seed)

    def rel_err(U, V, sel):
        return np.sqrt(((ms[sel] - U[sel] @ V[sel]) ** 2).sum(axis=(1, 2))) / norms[sel]

    err = rel_err(U, V, slice(None))
    hist = [[float(e)] for e in err] if keep_history else None
    live = np.ones(b, dtype=bool)
    for _ in range(opts.iters):
        idx = np.flatnonzero(live)
        if len(idx) == 0:
            break
        Ui, Vi, Mi = U[idx], V[idx], ms[idx]
        Ut = Ui.transpose(0, 2, 1)
        Vi = Vi * (Ut @ Mi) / (Ut @ Ui @ Vi + _TINY)
        Vt = Vi.transpose(0, 2, 1)
        Ui = Ui * (Mi @ Vt) / (Ui @ (Vi @ Vt) + _TINY)
        U[idx], V[idx] = Ui, Vi
        new = rel_err(U, V, idx)
        if keep_history:
            for k, e in zip(idx, new):
                hist[k].append(float(e))
        stalled = (err[idx] - new) < opts.tol * err[idx]
        err[idx] = new
        live[idx[stalled]] = False
    return U, V, err, hist


def order_groups(U: np.ndarray, V: np.ndarray):
    """Rescale each group so its channel weights sum to 1 and sort groups by
    descending contribution ||U_a|| * ||V_a|| (the product UV is unchanged)."""
    s = V.sum(axis=-1)  # (B, r)
    s = np.where(s > 0, s, 1.0)
    V = V / s[..., None]
    U = U * s[:, None, :]
    weight = np.linalg.norm(U, axis=1) * np.linalg.norm(V, axis=2)
    order = np.argsort(-weight, axis=1, kind="stable")
    U = np.take_along_axis(U, order[:, None, :], axis=2)
    V = np.take_along_axis(V, order[:, :, None], axis=1)
    return U, V


def nmf(m, r: int, iters: int = 200, tol: float = 1e-5, seed: int = 0, layer_index: int = -1) -> GroupFactorization:
    """Factor a non-negative (n, c) matrix as U (n, r) @ V (r, c)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise InputError(f"expected a matrix, got shape {m.shape}")
    U, V, err, hist = nmf_batch(m[None], r, NMFOptions(iters, tol, seed), keep_history=True)
    return GroupFactorization(layer_index, U[0], V[0], float(err[0]), hist[0])


def group_activation(features, factorization: GroupFactorization | np.ndarray, j: int = 0) -> float:
    """Projection of (H, W, C) activations onto group ``j``'s channel weights."""
    V = factorization.V if isinstance(factorization, GroupFactorization) else np.asarray(factorization)
    if V.ndim == 1:
        V = V[None]
    feats = np.asarray(features, dtype=np.float64)
    if feats.shape[-1] != V.shape[1]:
        raise InputError(f"activations have {feats.shape[-1]} channels, factorization expects {V.shape[1]}")
    w = V[j] / max(np.abs(V[j]).sum(), _TINY)
    return float(feats.reshape(-1, feats.shape[-1]).sum(axis=0) @ w)


def _objective(net, layer_index: int, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    act = net.forward_until(x, layer_index)  # (B, C, H, W)
    return (act.sum(dim=(2, 3)) * w).sum(dim=1)


def _init_images(shape, group_ids, layer_index: int, opts: AscentOptions) -> np.ndarray:
    """Initial noise for each group index; identical for every source image."""
    out = np.empty((len(group_ids),) + tuple(shape), dtype=np.float32)
    cache = {}
    for k, g in enumerate(group_ids):
        if g not in cache:
            rng = np.random.default_rng([opts.seed, layer_index, g])
            cache[g] = rng.uniform(opts.init_low, opts.init_high, size=shape).astype(np.float32)
        out[k] = cache[g]
    return out


def ascend_batch(model: ModelSnapshot, layer_index: int, directions: np.ndarray, group_ids,
                 opts: AscentOptions | None = None, keep_history: bool = False):
    """Gradient ascent of the group objective for each row of ``directions`` (B, C).

    Each step moves the input along its L2-normalized gradient and clips to
    [0, 1]. Returns channel-last images (B, H, W, C_in), final objectives and,
    optionally, the per-step objective history (B, steps + 1).
    """
    opts = opts or AscentOptions()
    if not 0 <= layer_index < model.num_layers:
        raise ValidationError(f"layer index {layer_index} outside [0, {model.num_layers})")
    h, w, c = model.input_shape
    directions = np.asarray(directions, dtype=np.float64)
    l1 = np.abs(directions).sum(axis=1, keepdims=True)
    weights = torch.from_numpy((directions / np.maximum(l1, _TINY)).astype(np.float32))
    x0 = _init_images((h, w, c), list(group_ids), layer_index, opts)
    x = torch.from_numpy(np.ascontiguousarray(x0.transpose(0, 3, 1, 2)))
    net = model.net
    jitter_rng = np.random.default_rng([opts.seed, layer_index, 10_007])
    hist = []
    for _ in range(opts.steps):
        x.requires_grad_(True)
        if opts.jitter:
            dy, dx = (int(v) for v in jitter_rng.integers(-opts.jitter, opts.jitter + 1, size=2))
            xin = torch.roll(x, shifts=(dy, dx), dims=(2, 3))
        else:
            xin = x
        obj = _objective(net, layer_index, xin, weights)
        if not torch.all(torch.isfinite(obj)):
            raise OptimizationError(f"non-finite group objective at layer {layer_index}")
        if keep_history:
            hist.append(obj.detach().numpy().astype(np.float64))
        (g,) = torch.autograd.grad(obj.sum(), x)
        norm = g.flatten(1).norm(dim=1).clamp_min(_TINY).view(-1, 1, 1, 1)
        x = torch.clamp(x.detach() + opts.step_size * g / norm, 0.0, 1.0)
    with torch.no_grad():
        final = _objective(net, layer_index, x, weights)
    if not torch.all(torch.isfinite(final)):
        raise OptimizationError(f"non-finite group objective at layer {layer_index}")
    final = final.numpy().astype(np.float64)
    if keep_history:
        hist.append(final)
    pixels = x.detach().permute(0, 2, 3, 1).numpy().copy()
    return pixels, final, (np.stack(hist, axis=1) if keep_history else None)


def activation_maximize(model: ModelSnapshot, layer_index: int, factorization: GroupFactorization, j: int,
                        cfg: AscentOptions | None = None) -> GroupFeature:
    if not 0 <= j < factorization.r:
        raise ValidationError(f"group {j} outside [0, {factorization.r})")
    pix, final, hist = ascend_batch(model, layer_index, factorization.V[j:j + 1], [j], cfg, keep_history=True)
    return GroupFeature(layer_index, j, pix[0], float(final[0]), hist[0].tolist())


def objective_of(model: ModelSnapshot, layer_index: int, pixels: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Group objective of each image in ``pixels`` (B, H, W, C) for one direction."""
    from .classifier import to_batch

    d = np.asarray(direction, dtype=np.float64)
    w = torch.from_numpy((d / max(np.abs(d).sum(), _TINY)).astype(np.float32))[None]
    with torch.no_grad():
        return _objective(model.net, layer_index, to_batch(pixels), w).numpy().astype(np.float64)


def factorize_layer(model: ModelSnapshot, image, layer_index: int, r: int,
                    nmf_opts: NMFOptions | None = None) -> GroupFactorization:
    _, stack = forward_with_features(model, image)
    p = stack.per_layer[layer_index]
    if not np.any(p):
        raise DegenerateError(f"layer {layer_index} ({model.layer_names[layer_index]}) is dead: all activations zero")
    nmf_opts = nmf_opts or NMFOptions()
    U, V, err, _ = nmf_batch(flatten_nonneg(p)[None], r, nmf_opts)
    U, V = order_groups(U, V)
    return GroupFactorization(layer_index, U[0], V[0], float(err[0]))


def group_features_for_layer(model: ModelSnapshot, image, layer_index: int, r: int,
                             nmf_opts: NMFOptions | None = None,
                             ascent: AscentOptions | None = None) -> list[GroupFeature]:
    fac = factorize_layer(model, image, layer_index, r, nmf_opts)
    pix, final, _ = ascend_batch(model, layer_index, fac.V, list(range(r)), ascent)
    return [GroupFeature(layer_index, j, pix[j], float(final[j])) for j in range(r)]
