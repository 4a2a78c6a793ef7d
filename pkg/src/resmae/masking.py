"""Mask sampling, the whole-vector residual dropout gate, and named modes.

A mask value of True means the position is hidden from the encoder and
must be predicted.  The residual token set is never masked position-wise:
the dropout gate removes the entire set from the transformer input, or
keeps all of it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .quantizer import ATTR_STREAMS


class Mode(str, enum.Enum):
    TRAIN = "TRAIN"
    ANALYSIS = "ANALYSIS"
    GENERATION = "GENERATION"
    ABLATE_NONE = "ABLATE_NONE"
    ABLATE_A_ONLY = "ABLATE_A_ONLY"
    ABLATE_R_ONLY = "ABLATE_R_ONLY"
    ABLATE_BOTH = "ABLATE_BOTH"


ABLATION_MODES = (Mode.ABLATE_NONE, Mode.ABLATE_A_ONLY, Mode.ABLATE_R_ONLY, Mode.ABLATE_BOTH)

# residual gate implied by each ablation mode (True = keep)
_MODE_RESIDUAL = {
    Mode.ABLATE_NONE: False,
    Mode.ABLATE_A_ONLY: False,
    Mode.ABLATE_R_ONLY: True,
    Mode.ABLATE_BOTH: True,
}

# attribute visibility per ablation mode (True = attributes visible)
_MODE_ATTRS_VISIBLE = {
    Mode.ABLATE_NONE: False,
    Mode.ABLATE_A_ONLY: True,
    Mode.ABLATE_R_ONLY: False,
    Mode.ABLATE_BOTH: True,
}


@dataclass(frozen=True)
class MaskRatios:
    """Independent per-position masking probabilities used in training."""

    mel: float = 0.5
    pitch: float = 0.5
    loudness: float = 0.5
    speaker: float = 0.5
    content: float = 0.5

    def validate(self):
        for name in ("mel",) + ATTR_STREAMS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"mask ratio {name}={v} outside [0, 1]")


@dataclass
class MaskConfig:
    """Per-stream visibility. True entries are masked (hidden, predicted)."""

    mel: np.ndarray
    attrs: dict[str, np.ndarray]
    mode: Mode

    def n_masked_mel(self) -> int:
        return int(self.mel.sum())

    def n_masked_attr(self, name: str) -> int:
        return int(self.attrs[name].sum())

    def validate_shapes(self, t_frames: int, f_bins: int) -> None:
        if self.mel.shape != (t_frames, f_bins):
            raise ValueError(f"mel mask shape {self.mel.shape} != ({t_frames}, {f_bins})")
        for name in ATTR_STREAMS:
            if self.attrs[name].shape != (t_frames,):
                raise ValueError(f"{name} mask must have length {t_frames}")


@dataclass(frozen=True)
class DropoutGate:
    """Whole-vector residual dropout threshold."""

    tau: float

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau {self.tau} outside [0, 1]")


def residual_dropout_gate(gate: DropoutGate, u: float) -> str:
    """Compare one uniform draw to the threshold: "drop" iff u < tau.

    tau = 0 therefore always keeps, tau = 1 always drops (u lives in [0, 1)).
    Dropping is all-or-nothing for the whole residual token set.
    """
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u {u} outside [0, 1)")
    return "drop" if u < gate.tau else "keep"


def sample_training_masks(ratios: MaskRatios, t_frames: int, f_bins: int,
                          rng: np.random.Generator) -> MaskConfig:
    """Independent per-position masks; draw order is mel, then attrs in canonical order."""
    ratios.validate()
    mel = rng.random((t_frames, f_bins)) < ratios.mel
    attrs = {name: rng.random(t_frames) < getattr(ratios, name) for name in ATTR_STREAMS}
    return MaskConfig(mel=mel, attrs=attrs, mode=Mode.TRAIN)


def inference_mask(mode: Mode | str, t_frames: int, f_bins: int) -> MaskConfig:
    """The fixed mask layouts of the named inference modes.

    ANALYSIS sees the full grid and predicts all attributes; GENERATION and
    the four ablation modes hide the full grid.  Residual keep/drop for the
    ablation modes is reported by :func:`mode_residual_gate`.
    """
    mode = Mode(mode)
    if mode == Mode.TRAIN:
        raise ValueError("TRAIN masks are sampled, not fixed; use sample_training_masks")
    if mode == Mode.ANALYSIS:
        mel = np.zeros((t_frames, f_bins), dtype=bool)
        attrs_masked = True
    elif mode == Mode.GENERATION:
        mel = np.ones((t_frames, f_bins), dtype=bool)
        attrs_masked = False
    else:
        mel = np.ones((t_frames, f_bins), dtype=bool)
        attrs_masked = not _MODE_ATTRS_VISIBLE[mode]
    attrs = {name: np.full(t_frames, attrs_masked, dtype=bool) for name in ATTR_STREAMS}
    return MaskConfig(mel=mel, attrs=attrs, mode=mode)


def mode_residual_gate(mode: Mode | str) -> str:
    """'keep' or 'drop' for the four ablation modes."""
    mode = Mode(mode)
    if mode not in _MODE_RESIDUAL:
        raise ValueError(f"mode {mode.value} has no fixed residual gate")
    return "keep" if _MODE_RESIDUAL[mode] else "drop"
