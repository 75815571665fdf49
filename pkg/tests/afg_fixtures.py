import numpy as np

from afg_lab.afg import AFG, encode_mixed_label


def synthetic_afgs(n_per_class=12, k=3, g=8, channels=4, seed=0, adv_fraction=0.5):
    """Separable toy AFGs: channel 0 carries the original class as a bright
    block, the last channel carries the adversarial class (blank when clean)."""
    rng = np.random.default_rng(seed)
    items = []
    block = g // k
    for y in range(k):
        for i in range(n_per_class):
            t = rng.uniform(0, 0.2, (g, g, channels)).astype(np.float32)
            t[y * block:(y + 1) * block, :, 0] += 0.8
            y_hat = None
            if rng.uniform() < adv_fraction:
                y_hat = int((y + 1 + rng.integers(0, k - 1)) % k)
                t[:, y_hat * block:(y_hat + 1) * block, -1] += 0.8
            items.append(AFG(t, encode_mixed_label(y, y_hat, k),
                             {"uid": f"{y}/{i}", "attack": "clean" if y_hat is None else "FGSM"}))
    order = rng.permutation(len(items))
    return [items[i] for i in order]
