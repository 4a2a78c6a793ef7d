"""Scalar uniform quantization of grids, and attribute token packing.

Grids are quantized cell-wise into a shared vocabulary: uniform bins over
the [lo, hi] value range observed at fit time.  The scheme is monotone,
invertible up to half a bin width, and keeps every reconstruction metric
oracle-checkable.  Attribute tracks are already discrete; they pass
through unchanged except that the per-utterance speaker id is broadcast
to a length-T sequence so all four streams share the time axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synth import FactorRanges, FactorSpec

DEGENERATE_EPS = 1e-6
ATTR_STREAMS = ("pitch", "loudness", "speaker", "content")


@dataclass(frozen=True)
class MelQuantizer:
    v_bins: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.v_bins < 2:
            raise ValueError(f"v_bins must be >= 2, got {self.v_bins}")
        if not self.lo < self.hi:
            raise ValueError(f"need lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def step(self) -> float:
        return (self.hi - self.lo) / self.v_bins


@dataclass(frozen=True)
class AttributeTokens:
    """The four explicit attribute streams, each a length-T token sequence."""

    pitch: np.ndarray
    loudness: np.ndarray
    speaker: np.ndarray
    content: np.ndarray
    ranges: FactorRanges

    def streams(self):
        """(name, tokens, vocab_size) triples in canonical order."""
        r = self.ranges
        yield "pitch", self.pitch, r.pitch_bins
        yield "loudness", self.loudness, r.loudness_bins
        yield "speaker", self.speaker, r.speakers
        yield "content", self.content, r.content

    def stream(self, name: str) -> np.ndarray:
        return getattr(self, name)

    @property
    def t_frames(self) -> int:
        return len(self.pitch)


def fit_mel_quantizer(grids, v_bins: int) -> MelQuantizer:
    """Fit the value range over a corpus of grids (global min/max)."""
    grids = list(grids)
    if not grids:
        raise ValueError("cannot fit a quantizer on an empty corpus")
    lo = min(float(np.min(g)) for g in grids)
    hi = max(float(np.max(g)) for g in grids)
    if lo == hi:
        lo -= DEGENERATE_EPS
        hi += DEGENERATE_EPS
    return MelQuantizer(v_bins=v_bins, lo=lo, hi=hi)


def quantize_mel(grid: np.ndarray, q: MelQuantizer) -> np.ndarray:
    """Cell-wise tokens: clamp(floor((x - lo) / (hi - lo) * v_bins), 0, v_bins - 1)."""
    scaled = (np.asarray(grid, dtype=np.float64) - q.lo) / (q.hi - q.lo) * q.v_bins
    return np.clip(np.floor(scaled), 0, q.v_bins - 1).astype(np.int64)


def dequantize_mel(tokens: np.ndarray, q: MelQuantizer) -> np.ndarray:
    """Map each token to its bin center."""
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= q.v_bins):
        raise ValueError(f"tokens outside [0, {q.v_bins})")
    return q.lo + (tokens.astype(np.float64) + 0.5) * (q.hi - q.lo) / q.v_bins


def quantize_attributes(factors: FactorSpec, ranges: FactorRanges) -> AttributeTokens:
    """Attribute streams for one sample; speaker id broadcast over time."""
    t = len(factors.pitch_track)
    return AttributeTokens(
        pitch=np.asarray(factors.pitch_track, dtype=np.int64),
        loudness=np.asarray(factors.loudness_track, dtype=np.int64),
        speaker=np.full(t, factors.speaker_id, dtype=np.int64),
        content=np.asarray(factors.content_seq, dtype=np.int64),
        ranges=ranges,
    )
