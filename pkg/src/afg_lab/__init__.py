"""Adversarial feature genome toolkit: attacks, layer separability metrics,
group-feature genomes and multi-label adversarial recognition."""

__version__ = "0.1.0"
