"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np
import torch

from afg_lab.classifier import ConvNet


# one probe architecture per layer type (each arch isolates one kind as far as possible)
LAYER_PROBES = {
    "conv": {"input_shape": [5, 5, 2], "num_outputs": 3, "layers": [
        {"type": "conv", "name": "conv1", "in": 2, "out": 3, "kernel": 3, "padding": 1},
        {"type": "flatten"}, {"type": "dense", "name": "fc", "in": 75, "out": 3}]},
    "conv_stride": {"input_shape": [6, 6, 1], "num_outputs": 2, "layers": [
        {"type": "conv", "name": "conv1", "in": 1, "out": 2, "kernel": 3, "padding": 0, "stride": 2},
        {"type": "flatten"}, {"type": "dense", "name": "fc", "in": 8, "out": 2}]},
    "relu": {"input_shape": [4, 4, 1], "num_outputs": 2, "layers": [
        {"type": "conv", "name": "conv1", "in": 1, "out": 2, "kernel": 1},
        {"type": "relu"}, {"type": "flatten"}, {"type": "dense", "name": "fc", "in": 32, "out": 2}]},
    "maxpool": {"input_shape": [4, 4, 2], "num_outputs": 2, "layers": [
        {"type": "conv", "name": "conv1", "in": 2, "out": 2, "kernel": 1},
        {"type": "maxpool", "size": 2}, {"type": "flatten"}, {"type": "dense", "name": "fc", "in": 8, "out": 2}]},
    "dense": {"input_shape": [2, 2, 1], "num_outputs": 3, "layers": [
        {"type": "conv", "name": "conv1", "in": 1, "out": 1, "kernel": 1},
        {"type": "flatten"}, {"type": "dense", "name": "fc1", "in": 4, "out": 5}, {"type": "relu"},
        {"type": "dense", "name": "fc2", "in": 5, "out": 3}]},
}


def central_difference_check(arch: dict, seed: int = 0, h: float = 1e-6, probes: int = 12):
    """Worst relative error between autograd and central differences of a
    random scalar projection of the logits, over input and parameter probes."""
    torch.manual_seed(seed)
    net = ConvNet(arch).double()
    for p in net.parameters():
        torch.nn.init.normal_(p, std=0.5)
    hh, ww, c = arch["input_shape"]
    x = torch.rand(2, c, hh, ww, dtype=torch.float64, requires_grad=True)
    proj = torch.randn(2, arch["num_outputs"], dtype=torch.float64)

    def f():
        return float((net(x) * proj).sum())

    loss = (net(x) * proj).sum()
    targets = [x] + list(net.parameters())
    grads = torch.autograd.grad(loss, targets)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for t, g in zip(targets, grads):
            flat, gflat = t.view(-1), g.reshape(-1)
            for i in rng.choice(flat.numel(), size=min(probes, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + h
                up = f()
                flat[i] = old - h
                down = f()
                flat[i] = old
                fd = (up - down) / (2 * h)
                an = gflat[i].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    return worst


def kl_reference(mu, nu):
    mu, nu = np.asarray(mu, float), np.asarray(nu, float)
    return float(sum(m * np.log(m / n) for m, n in zip(mu, nu) if m > 0))


def frobenius_objective(m, u, v):
    return float(((m - u @ v) ** 2).sum())


class AffineBinary(torch.nn.Module):
    """Two logits (w.x + b, 0) on a flattened (1, 2, 1, 1) input."""

    def __init__(self, w=(1.0, -1.0), b=0.0):
        super().__init__()
        self.w = torch.tensor(w, dtype=torch.float32)
        self.b = b

    def forward(self, x):
        z = x.flatten(1) @ self.w + self.b
        return torch.stack([z, torch.zeros_like(z)], dim=1)
