"""Deterministic seed derivation.

Every random stream in the toolkit is an explicit ``torch.Generator`` keyed by
a root seed plus a string label, so independent streams (chain noise versus
auxiliary noise, per-image sub-seeds, ...) never interleave and results are
reproducible regardless of call order.
"""

import hashlib

import torch


def derive_seed(seed: int, *labels) -> int:
    """Map (seed, labels...) to a stable 63-bit integer."""
    text = repr((int(seed),) + tuple(labels)).encode()
    digest = hashlib.sha256(text).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def make_generator(seed: int, *labels) -> torch.Generator:
    """CPU generator seeded from :func:`derive_seed`."""
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *labels))
    return g
