"""Seedable SplitMix64 stream used wherever an ordering must be reproducible
outside Python (dataset shuffles, class selection).

The algorithm identifier written to manifests is ``PRNG_ID``.
"""

PRNG_ID = "splitmix64/fisher-yates-mod"

_MASK = (1 << 64) - 1


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Integer in [0, n) by plain modulo reduction."""
        return self.next_u64() % n


def shuffled(items, seed: int) -> list:
    """Fisher-Yates shuffle (descending i, swap with j = below(i + 1))."""
    out = list(items)
    gen = SplitMix64(seed)
    for i in range(len(out) - 1, 0, -1):
        j = gen.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out
