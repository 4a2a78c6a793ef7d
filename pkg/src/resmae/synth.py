"""Synthetic factorized corpus of spectrogram-like grids.

Every grid is a pure function of a small set of generative factors, so
downstream evaluations can always be checked against the exact ground
truth that produced the data.  A grid is the clamped sum of five terms:

* ``base``      - content/speaker texture, 0.2 + 0.1 * hash01(c, f mod 8, s)
* ``bump``      - 0.3 peak at the frequency bin proportional to the pitch
                  value, with a one-bin triangular falloff (0.15 at +-1)
* ``loudness``  - per-frame additive ramp 0.25 * l / loudness_bins
* ``style``     - hidden scalar tilt, style * 0.1 * (f / F - 0.5)
* ``noise``     - optional seeded pattern scaled to max amplitude 0.15

The loudness term is additive (zero at l = 0) so that every factor
contributes a separable signature and term-level oracles stay exact.

Corpus file format (version 1, little-endian throughout)::

    magic   4 bytes  b"RMC1"
    version u32      1
    count   u32      number of samples
    T, F    u32, u32 grid shape
    pitch_bins, loudness_bins, speakers, content   4 x u32
    then per sample:
        pitch_track    int32[T]
        loudness_track int32[T]
        content_seq    int32[T]
        speaker_id     int32
        style_scalar   f64
        noise_present  u8
        noise_seed     u64
        grid           f64[T*F], row-major

A plain-text manifest (key=value lines) is written next to the binary
file by :func:`save_corpus`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

MAGIC = b"RMC1"
FORMAT_VERSION = 1

BASE_FLOOR = 0.2
BASE_SPAN = 0.1
BUMP_PEAK = 0.3
BUMP_SIDE = 0.15
LOUD_SPAN = 0.25
STYLE_SPAN = 0.1
NOISE_AMP = 0.15

DEFAULT_T = 32
DEFAULT_F = 32


class CorpusFormatError(ValueError):
    """Raised when a corpus file fails magic/version/size validation."""


@dataclass(frozen=True)
class FactorRanges:
    """Vocabulary sizes of the four explicit factor tracks."""

    pitch_bins: int = 16
    loudness_bins: int = 8
    speakers: int = 8
    content: int = 16


DEFAULT_RANGES = FactorRanges()


@dataclass(frozen=True)
class FactorSpec:
    """Ground-truth generative factors of one sample.

    ``style_scalar`` is a hidden residual factor in [-1, 1]; it is never
    exposed as an attribute token stream.
    """

    pitch_track: np.ndarray
    loudness_track: np.ndarray
    speaker_id: int
    content_seq: np.ndarray
    style_scalar: float
    noise_present: bool = False
    noise_seed: int = 0

    def validate(self, t_frames: int, ranges: FactorRanges) -> None:
        for name, track, hi in (
            ("pitch_track", self.pitch_track, ranges.pitch_bins),
            ("loudness_track", self.loudness_track, ranges.loudness_bins),
            ("content_seq", self.content_seq, ranges.content),
        ):
            track = np.asarray(track)
            if track.shape != (t_frames,):
                raise ValueError(f"{name} must have length {t_frames}, got shape {track.shape}")
            if track.min(initial=0) < 0 or track.max(initial=0) >= hi:
                raise ValueError(f"{name} has entries outside [0, {hi})")
        if not 0 <= self.speaker_id < ranges.speakers:
            raise ValueError(f"speaker_id {self.speaker_id} outside [0, {ranges.speakers})")
        if not -1.0 <= self.style_scalar <= 1.0:
            raise ValueError(f"style_scalar {self.style_scalar} outside [-1, 1]")
        if self.noise_seed < 0:
            raise ValueError("noise_seed must be non-negative")


@dataclass(frozen=True)
class SyntheticSample:
    factors: FactorSpec
    grid: np.ndarray


@dataclass
class Corpus:
    samples: list[SyntheticSample]
    t_frames: int
    f_bins: int
    ranges: FactorRanges = field(default_factory=FactorRanges)

    def __len__(self) -> int:
        return len(self.samples)


def _hash01(a, b, c):
    """Deterministic pseudo-random reals in [0, 1) from integer triples.

    splitmix64-style finalizer on a wrapping integer combination; stable
    across platforms and numpy versions.
    """
    x = (
        np.asarray(a, dtype=np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        + np.asarray(b, dtype=np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
        + np.asarray(c, dtype=np.uint64) * np.uint64(0x94D049BB133111EB)
        + np.uint64(0x2545F4914F6CDD1D)
    )
    with np.errstate(over="ignore"):
        x ^= x >> np.uint64(30)
        x *= np.uint64(0xBF58476D1CE4E5B9)
        x ^= x >> np.uint64(27)
        x *= np.uint64(0x94D049BB133111EB)
        x ^= x >> np.uint64(31)
    return x.astype(np.float64) / 2.0**64


def pitch_center_bin(pitch, f_bins: int, pitch_bins: int):
    """Frequency bin of the bump peak: proportional to the pitch value."""
    pitch = np.asarray(pitch)
    if pitch_bins <= 1:
        return np.zeros_like(pitch)
    return np.rint(pitch * (f_bins - 1) / (pitch_bins - 1)).astype(np.int64)


def bump_template(pitch: int, f_bins: int, pitch_bins: int) -> np.ndarray:
    """The additive pitch signature of one frame, as a length-F vector."""
    tmpl = np.zeros(f_bins)
    c = int(pitch_center_bin(pitch, f_bins, pitch_bins))
    tmpl[c] = BUMP_PEAK
    if c - 1 >= 0:
        tmpl[c - 1] = BUMP_SIDE
    if c + 1 < f_bins:
        tmpl[c + 1] = BUMP_SIDE
    return tmpl


def base_component(factors: FactorSpec, t_frames: int, f_bins: int) -> np.ndarray:
    f_idx = np.arange(f_bins)
    c = np.asarray(factors.content_seq)[:, None]
    return BASE_FLOOR + BASE_SPAN * _hash01(c, (f_idx % 8)[None, :], factors.speaker_id)


def bump_component(factors: FactorSpec, t_frames: int, f_bins: int,
                   ranges: FactorRanges = DEFAULT_RANGES) -> np.ndarray:
    grid = np.zeros((t_frames, f_bins))
    centers = pitch_center_bin(factors.pitch_track, f_bins, ranges.pitch_bins)
    rows = np.arange(t_frames)
    grid[rows, centers] += BUMP_PEAK
    for side in (-1, 1):
        cc = centers + side
        ok = (cc >= 0) & (cc < f_bins)
        grid[rows[ok], cc[ok]] += BUMP_SIDE
    return grid


def loudness_component(factors: FactorSpec, t_frames: int, f_bins: int,
                       ranges: FactorRanges = DEFAULT_RANGES) -> np.ndarray:
    ramp = LOUD_SPAN * np.asarray(factors.loudness_track, dtype=np.float64) / ranges.loudness_bins
    return np.broadcast_to(ramp[:, None], (t_frames, f_bins)).copy()


def style_component(style_scalar: float, t_frames: int, f_bins: int) -> np.ndarray:
    tilt = style_scalar * STYLE_SPAN * (np.arange(f_bins) / f_bins - 0.5)
    return np.broadcast_to(tilt[None, :], (t_frames, f_bins)).copy()


def noise_pattern(noise_seed: int, t_frames: int, f_bins: int) -> np.ndarray:
    """Seeded pseudo-random pattern rescaled to max |entry| = 0.15."""
    rng = np.random.default_rng(noise_seed)
    pat = rng.uniform(-1.0, 1.0, size=(t_frames, f_bins))
    pat *= NOISE_AMP / np.abs(pat).max()
    return pat


def generate_sample(factors: FactorSpec, t_frames: int = DEFAULT_T,
                    f_bins: int = DEFAULT_F,
                    ranges: FactorRanges = DEFAULT_RANGES) -> SyntheticSample:
    """Render the grid for a factor specification.

    Pure function: identical arguments produce bitwise-identical grids.
    """
    if t_frames < 4 or f_bins < 8:
        raise ValueError(f"grid too small: T={t_frames}, F={f_bins} (need T>=4, F>=8)")
    factors.validate(t_frames, ranges)
    grid = base_component(factors, t_frames, f_bins)
    grid += bump_component(factors, t_frames, f_bins, ranges)
    grid += loudness_component(factors, t_frames, f_bins, ranges)
    grid += style_component(factors.style_scalar, t_frames, f_bins)
    if factors.noise_present:
        grid += noise_pattern(factors.noise_seed, t_frames, f_bins)
    np.clip(grid, 0.0, 1.0, out=grid)
    return SyntheticSample(factors=factors, grid=grid)


def factors_for_index(seed: int, index: int, t_frames: int = DEFAULT_T,
                      ranges: FactorRanges = DEFAULT_RANGES,
                      noise_present: bool = False) -> FactorSpec:
    """Factors of corpus sample ``index`` under corpus ``seed``.

    Each sample gets its own child stream SeedSequence(seed, spawn_key=(0, index)),
    so samples can be generated independently (and in parallel) in any order.
    Draw order within a sample: pitch, loudness, content, speaker, style, noise_seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0, index)))
    return FactorSpec(
        pitch_track=rng.integers(0, ranges.pitch_bins, size=t_frames, dtype=np.int64),
        loudness_track=rng.integers(0, ranges.loudness_bins, size=t_frames, dtype=np.int64),
        content_seq=rng.integers(0, ranges.content, size=t_frames, dtype=np.int64),
        speaker_id=int(rng.integers(0, ranges.speakers)),
        style_scalar=float(rng.uniform(-1.0, 1.0)),
        noise_present=noise_present,
        noise_seed=int(rng.integers(0, 2**63)),
    )


def noisy_index_set(n: int, seed: int, noise_fraction: float) -> set[int]:
    """Which sample indices carry noise: exactly round(n * fraction) of them."""
    k = int(np.floor(n * noise_fraction + 0.5))
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,))).permutation(n)
    return set(int(i) for i in perm[:k])


def generate_corpus(n: int, seed: int, noise_fraction: float = 0.0,
                    t_frames: int = DEFAULT_T, f_bins: int = DEFAULT_F,
                    ranges: FactorRanges = DEFAULT_RANGES,
                    workers: int = 1) -> Corpus:
    """Draw ``n`` samples with uniform factor marginals from a seeded stream."""
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    if not 0.0 <= noise_fraction <= 1.0:
        raise ValueError(f"noise_fraction {noise_fraction} outside [0, 1]")
    noisy = noisy_index_set(n, seed, noise_fraction)
    args = [(seed, i, t_frames, f_bins, ranges, i in noisy) for i in range(n)]
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(workers) as pool:
            samples = pool.map(_gen_one, args)
    else:
        samples = [_gen_one(a) for a in args]
    return Corpus(samples=samples, t_frames=t_frames, f_bins=f_bins, ranges=ranges)


def _gen_one(args) -> SyntheticSample:
    seed, index, t_frames, f_bins, ranges, noisy = args
    factors = factors_for_index(seed, index, t_frames, ranges, noise_present=noisy)
    return generate_sample(factors, t_frames, f_bins, ranges)


def clean_twin(sample: SyntheticSample, t_frames: int, f_bins: int,
               ranges: FactorRanges = DEFAULT_RANGES) -> SyntheticSample:
    """The same sample rendered with noise_present=False."""
    return generate_sample(replace(sample.factors, noise_present=False),
                           t_frames, f_bins, ranges)


def noise_energy_projection(grid: np.ndarray, noise_seed: int,
                            t_frames: int | None = None,
                            f_bins: int | None = None) -> float:
    """Squared inner product of ``grid`` with the unit-normalized pattern.

    Measures how much of the specific seeded noise pattern survives in a
    (reconstructed) grid.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"grid must be 2-D, got shape {grid.shape}")
    t = t_frames if t_frames is not None else grid.shape[0]
    f = f_bins if f_bins is not None else grid.shape[1]
    if grid.shape != (t, f):
        raise ValueError(f"grid shape {grid.shape} does not match pattern shape ({t}, {f})")
    pat = noise_pattern(noise_seed, t, f)
    unit = pat / np.linalg.norm(pat)
    return float((grid * unit).sum() ** 2)


# ---------------------------------------------------------------------------
# corpus persistence
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIIIII")


def save_corpus(corpus: Corpus, path: str, seed: int | None = None,
                noise_fraction: float | None = None) -> None:
    """Write the binary corpus file plus a ``<path>.manifest`` text file."""
    r = corpus.ranges
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(corpus), corpus.t_frames,
                              corpus.f_bins, r.pitch_bins, r.loudness_bins,
                              r.speakers, r.content))
        for s in corpus.samples:
            f = s.factors
            fh.write(np.asarray(f.pitch_track, dtype="<i4").tobytes())
            fh.write(np.asarray(f.loudness_track, dtype="<i4").tobytes())
            fh.write(np.asarray(f.content_seq, dtype="<i4").tobytes())
            fh.write(struct.pack("<idBQ", f.speaker_id, f.style_scalar,
                                 int(f.noise_present), f.noise_seed))
            fh.write(np.ascontiguousarray(s.grid, dtype="<f8").tobytes())
    n_noisy = sum(1 for s in corpus.samples if s.factors.noise_present)
    lines = [
        f"format_version={FORMAT_VERSION}",
        f"count={len(corpus)}",
        f"t_frames={corpus.t_frames}",
        f"f_bins={corpus.f_bins}",
        f"pitch_bins={r.pitch_bins}",
        f"loudness_bins={r.loudness_bins}",
        f"speakers={r.speakers}",
        f"content={r.content}",
        f"noisy_count={n_noisy}",
    ]
    if seed is not None:
        lines.append(f"seed={seed}")
    if noise_fraction is not None:
        lines.append(f"noise_fraction={noise_fraction!r}")
    with open(path + ".manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_corpus(path: str) -> Corpus:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise CorpusFormatError(f"file too short for header: {path}")
    magic, version, count, t_frames, f_bins, pb, lb, sp, ct = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r} in {path}")
    if version != FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported corpus format_version {version}")
    ranges = FactorRanges(pitch_bins=pb, loudness_bins=lb, speakers=sp, content=ct)
    tail = struct.Struct("<idBQ")
    rec_size = 3 * 4 * t_frames + tail.size + 8 * t_frames * f_bins
    expected = _HEADER.size + count * rec_size
    if len(data) != expected:
        raise CorpusFormatError(
            f"corpus size mismatch: expected {expected} bytes, found {len(data)}"
        )
    samples = []
    off = _HEADER.size
    for _ in range(count):
        pitch = np.frombuffer(data, "<i4", t_frames, off).astype(np.int64)
        off += 4 * t_frames
        loud = np.frombuffer(data, "<i4", t_frames, off).astype(np.int64)
        off += 4 * t_frames
        content = np.frombuffer(data, "<i4", t_frames, off).astype(np.int64)
        off += 4 * t_frames
        speaker, style, noisy, nseed = tail.unpack_from(data, off)
        off += tail.size
        grid = np.frombuffer(data, "<f8", t_frames * f_bins, off).reshape(t_frames, f_bins).copy()
        off += 8 * t_frames * f_bins
        factors = FactorSpec(pitch_track=pitch, loudness_track=loud,
                             content_seq=content, speaker_id=speaker,
                             style_scalar=style, noise_present=bool(noisy),
                             noise_seed=nseed)
        samples.append(SyntheticSample(factors=factors, grid=grid))
    return Corpus(samples=samples, t_frames=t_frames, f_bins=f_bins, ranges=ranges)
