"""Reproducibility plumbing: seed streams, the held-out split, config files.

All randomness flows from a single root seed.  Sub-streams are derived
with ``SeedSequence(seed, spawn_key=(offset, ...))`` using these fixed
offsets:

* 0, plus a sample index - corpus factor draws (one child per sample)
* 1 - corpus noise assignment permutation
* 2 - model parameter initialization
* 3 - training loop (mask sampling, gate draws, epoch shuffles)
* 4 - standalone benchmarks and fitting utilities

Config files are flat ``key=value`` text, one pair per line, ``#`` for
comments; command-line flags override file values.
"""

from __future__ import annotations

import hashlib

import numpy as np

STREAM_FACTORS = 0
STREAM_NOISE_ASSIGN = 1
STREAM_INIT = 2
STREAM_TRAIN = 3
STREAM_BENCH = 4

HELDOUT_FRACTION = 0.1


def substream(seed: int, stream: int) -> np.random.Generator:
    """Generator for one named sub-stream of the root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def heldout_mask(n: int, seed: int) -> np.ndarray:
    """Seed-stable held-out split: sample i is held out iff its hash lands
    in the bottom tenth.  Uses sha256 so the split never depends on numpy
    internals or platform."""
    out = np.zeros(n, dtype=bool)
    for i in range(n):
        digest = hashlib.sha256(f"{seed}:{i}".encode()).digest()
        out[i] = int.from_bytes(digest[:8], "big") % 10 == 0
    return out


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse flat key=value lines; '#' starts a comment, blanks ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def parse_kv_file(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), source=path)
