"""Evaluation harness: ablation grid, threshold sweep, pitch manipulation,
and denoising, all scored against the synthetic ground truth.

Residual tokens are always extracted from the ground-truth grid of the
evaluated sample (analyze-then-generate).  A model trained at tau = 1
never saw its residual stream, so "residual kept" evaluations of such a
model drop the tokens; kept and dropped paths then coincide exactly.

Every emitter writes a comma-separated table with a header row plus a
JSON metrics record; aggregation runs in fixed sample order so results
are bitwise reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import Checkpoint
from .config import heldout_mask
from .masking import ABLATION_MODES, Mode, mode_residual_gate
from .model import extract_pair, embed_full_grid, generate
from .quantizer import ATTR_STREAMS, quantize_attributes, quantize_mel
from .synth import (Corpus, FactorSpec, SyntheticSample, base_component, bump_template,
                    clean_twin, generate_sample, loudness_component,
                    noise_energy_projection, style_component)

# state handed to forked evaluation workers (read-only after fork)
_PAR_STATE: dict = {}


def _pmap_indexed(fn, n: int, workers: int):
    """fn(i) for i in range(n), in index order; fork pool when workers > 1.

    The per-index work must be pure (it is: model inference plus metric
    arithmetic), so the result is identical for any worker count.
    """
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(min(workers, n)) as pool:
        return pool.map(fn, range(n))


def reconstruction_error(grid: np.ndarray, grid_hat: np.ndarray) -> float:
    """Mean squared elementwise difference."""
    grid = np.asarray(grid)
    grid_hat = np.asarray(grid_hat)
    if grid.shape != grid_hat.shape:
        raise ValueError(f"shape mismatch: {grid.shape} vs {grid_hat.shape}")
    diff = grid.astype(np.float64) - grid_hat.astype(np.float64)
    return float((diff * diff).mean())


def token_accuracy(pred: np.ndarray, true: np.ndarray) -> float:
    return float((np.asarray(pred) == np.asarray(true)).mean())


def style_projection(grid: np.ndarray) -> float:
    """Least-squares coefficient of the style tilt basis in a grid."""
    t, f = grid.shape
    basis = style_component(1.0, t, f)
    return float((grid * basis).sum() / (basis * basis).sum())


def recover_pitch_track(grid: np.ndarray, factors: FactorSpec, t_frames: int,
                        f_bins: int, ranges) -> np.ndarray:
    """Matched-filter pitch detection against the known non-pitch background.

    The base/loudness/style terms are reconstructed from the sample's
    ground-truth factors and subtracted; each frame's residue is then
    correlated with every bump template and the argmax wins.  On clean
    generator output this recovers the exact input track.
    """
    background = base_component(factors, t_frames, f_bins)
    background = background + loudness_component(factors, t_frames, f_bins, ranges)
    background = background + style_component(factors.style_scalar, t_frames, f_bins)
    residue = np.asarray(grid, dtype=np.float64) - background
    templates = np.stack([bump_template(p, f_bins, ranges.pitch_bins)
                          for p in range(ranges.pitch_bins)])
    scores = residue @ templates.T
    return np.argmax(scores, axis=1).astype(np.int64)


def shifted_pitch_track(track: np.ndarray, shift_percent: float, pitch_bins: int) -> np.ndarray:
    """Target track: clamp(round(p * (1 + shift/100)))."""
    shifted = np.rint(np.asarray(track) * (1.0 + shift_percent / 100.0))
    return np.clip(shifted, 0, pitch_bins - 1).astype(np.int64)


def heldout_samples(corpus: Corpus, seed: int) -> list[SyntheticSample]:
    mask = heldout_mask(len(corpus), seed)
    return [corpus.samples[i] for i in np.flatnonzero(mask)]


def _effective_residual(ckpt: Checkpoint, keep: bool) -> bool:
    # tau = 1 disables the residual stream entirely, training and inference
    return keep and ckpt.tau < 1.0


def _extract_for(ckpt: Checkpoint, sample: SyntheticSample, want_noise: bool):
    tokens = quantize_mel(sample.grid, ckpt.quantizer)
    grid_emb = embed_full_grid(ckpt.params, ckpt.model, tokens)
    r, rn, _ = extract_pair(ckpt.params, ckpt.model, grid_emb,
                            want_noise and ckpt.model.n_noise > 0)
    return tokens, r, rn


@dataclass
class AblationRow:
    mode: str
    mse: float
    mel_token_accuracy: float
    attr_accuracy: dict[str, float]
    style_error: float
    noise_projection: float


def _evaluate_mode(ckpt: Checkpoint, sample: SyntheticSample, mode: Mode,
                   tokens, residual, noise_residual):
    cfg = ckpt.model
    attrs = quantize_attributes(sample.factors, cfg.ranges)
    keep = _effective_residual(ckpt, mode_residual_gate(mode) == "keep")
    use_noise = keep and sample.factors.noise_present
    out = generate(ckpt.params, cfg, ckpt.quantizer, attrs, mode,
                   residual=residual if keep else None,
                   noise_residual=noise_residual if use_noise else None)
    mse = reconstruction_error(sample.grid, out.grid)
    acc = token_accuracy(out.mel_tokens, tokens)
    attr_acc = {}
    for name in ATTR_STREAMS:
        if name in out.attr_tokens:
            attr_acc[name] = token_accuracy(out.attr_tokens[name], attrs.stream(name))
    style_err = abs(style_projection(out.grid) - style_projection(sample.grid))
    noise_proj = (noise_energy_projection(out.grid, sample.factors.noise_seed)
                  if sample.factors.noise_present else float("nan"))
    return mse, acc, attr_acc, style_err, noise_proj


def _ablate_one_sample(i: int):
    ckpt, samples, modes = _PAR_STATE["ablate"]
    sample = samples[i]
    tokens, r, rn = _extract_for(ckpt, sample, sample.factors.noise_present)
    return {mode: _evaluate_mode(ckpt, sample, mode, tokens, r, rn) for mode in modes}


def ablation_table(ckpt: Checkpoint, corpus: Corpus, max_samples: int | None = None,
                   modes=ABLATION_MODES, workers: int = 1):
    """Mean metrics per ablation mode over the held-out split."""
    samples = heldout_samples(corpus, ckpt.seed)
    if max_samples is not None:
        samples = samples[:max_samples]
    if not samples:
        raise ValueError("no held-out samples to evaluate")
    modes = tuple(Mode(mo) for mo in modes)
    _PAR_STATE["ablate"] = (ckpt, samples, modes)
    per_sample = _pmap_indexed(_ablate_one_sample, len(samples), workers)
    _PAR_STATE.pop("ablate", None)
    rows = []
    for mode in modes:
        mses, accs, styles, projs = [], [], [], []
        attr_accs: dict[str, list[float]] = {name: [] for name in ATTR_STREAMS}
        for result in per_sample:
            mse, acc, attr_acc, style_err, noise_proj = result[mode]
            mses.append(mse)
            accs.append(acc)
            styles.append(style_err)
            if not np.isnan(noise_proj):
                projs.append(noise_proj)
            for name, v in attr_acc.items():
                attr_accs[name].append(v)
        rows.append(AblationRow(
            mode=mode.value,
            mse=float(np.mean(mses)),
            mel_token_accuracy=float(np.mean(accs)),
            attr_accuracy={name: float(np.mean(v)) for name, v in attr_accs.items() if v},
            style_error=float(np.mean(styles)),
            noise_projection=float(np.mean(projs)) if projs else float("nan"),
        ))
    return rows


def write_ablation(rows, csv_path: str) -> None:
    """CSV table plus a JSON record at ``csv_path`` with extension .json."""
    header = ["mode", "mse", "mel_token_accuracy", "style_error", "noise_projection"]
    header += [f"acc_{name}" for name in ATTR_STREAMS]
    lines = [",".join(header)]
    for row in rows:
        vals = [row.mode, repr(row.mse), repr(row.mel_token_accuracy),
                repr(row.style_error), repr(row.noise_projection)]
        vals += [repr(row.attr_accuracy[name]) if name in row.attr_accuracy else ""
                 for name in ATTR_STREAMS]
        lines.append(",".join(vals))
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    record = {row.mode: {"mse": row.mse, "mel_token_accuracy": row.mel_token_accuracy,
                         "style_error": row.style_error}
              for row in rows}
    with open(_json_sibling(csv_path), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _json_sibling(csv_path: str) -> str:
    return (csv_path[:-4] if csv_path.endswith(".csv") else csv_path) + ".json"


def generation_mse(ckpt: Checkpoint, corpus: Corpus, residual_kept: bool,
                   max_samples: int | None = None):
    """Held-out generation quality with attributes visible.

    Returns (mse, token_accuracy) means. ``residual_kept`` toggles
    injecting the sample's extracted residual tokens.
    """
    samples = heldout_samples(corpus, ckpt.seed)
    if max_samples is not None:
        samples = samples[:max_samples]
    mses, accs = [], []
    for sample in samples:
        keep = _effective_residual(ckpt, residual_kept)
        tokens, r, rn = _extract_for(ckpt, sample, keep and sample.factors.noise_present)
        mode = Mode.ABLATE_BOTH if keep else Mode.ABLATE_A_ONLY
        attrs = quantize_attributes(sample.factors, ckpt.model.ranges)
        out = generate(ckpt.params, ckpt.model, ckpt.quantizer, attrs, mode,
                       residual=r if keep else None,
                       noise_residual=rn if keep and sample.factors.noise_present else None)
        mses.append(reconstruction_error(sample.grid, out.grid))
        accs.append(token_accuracy(out.mel_tokens, tokens))
    return float(np.mean(mses)), float(np.mean(accs))


def tau_sweep(tau_values, base_cfg, out_prefix: str | None = None):
    """Train one desk model per threshold; evaluate kept and dropped curves.

    ``base_cfg`` is a TrainConfig; per-tau checkpoint/metrics paths are
    derived from its paths (suffix ``_tau<value>``).  Returns the curve
    rows; writes ``<out_prefix>.csv`` and ``.json`` when a prefix is given.
    """
    from .synth import load_corpus
    from .train import train

    corpus = load_corpus(base_cfg.corpus_path)
    rows = []
    for tau in tau_values:
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau {tau} outside [0, 1]")
        suffix = f"_tau{tau:g}"
        cfg = replace(
            base_cfg, tau=float(tau),
            checkpoint_path=_suffixed(base_cfg.checkpoint_path, suffix),
            metrics_path=_suffixed(base_cfg.metrics_path, suffix))
        ckpt, _ = train(cfg)
        mse_kept, acc_kept = generation_mse(ckpt, corpus, residual_kept=True)
        mse_dropped, acc_dropped = generation_mse(ckpt, corpus, residual_kept=False)
        rows.append({"tau": float(tau), "mse_residual_kept": mse_kept,
                     "mse_residual_dropped": mse_dropped,
                     "acc_residual_kept": acc_kept,
                     "acc_residual_dropped": acc_dropped})
    if out_prefix:
        header = ["tau", "mse_residual_kept", "mse_residual_dropped",
                  "acc_residual_kept", "acc_residual_dropped"]
        lines = [",".join(header)]
        for row in rows:
            lines.append(",".join(repr(row[k]) for k in header))
        with open(out_prefix + ".csv", "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        with open(out_prefix + ".json", "w", encoding="utf-8") as fh:
            fh.write(json.dumps(rows, sort_keys=True) + "\n")
    return rows


def _suffixed(path: str | None, suffix: str) -> str | None:
    if path is None:
        return None
    if "." in path.rsplit("/", 1)[-1]:
        stem, ext = path.rsplit(".", 1)
        return f"{stem}{suffix}.{ext}"
    return path + suffix


def pitch_shift_eval(ckpt: Checkpoint, corpus: Corpus, shift_percent: float,
                     max_samples: int | None = None):
    """Pitch manipulation fidelity at one target shift.

    Generates from shifted attribute tracks with the residual kept and
    dropped, recovers the realized track by matched filtering, and
    reports absolute average error plus MSE against the ground-truth
    grid rendered with the shifted track.
    """
    cfg = ckpt.model
    samples = heldout_samples(corpus, ckpt.seed)
    if max_samples is not None:
        samples = samples[:max_samples]
    aae = {"kept": [], "dropped": []}
    mse = {"kept": [], "dropped": []}
    mean_real = {"kept": [], "dropped": []}
    mean_target = []
    for sample in samples:
        target = shifted_pitch_track(sample.factors.pitch_track, shift_percent,
                                     cfg.ranges.pitch_bins)
        factors_shifted = replace(sample.factors, pitch_track=target)
        grid_target = generate_sample(factors_shifted, cfg.t_frames, cfg.f_bins,
                                      cfg.ranges).grid
        attrs = quantize_attributes(factors_shifted, cfg.ranges)
        mean_target.append(float(target.mean()))
        for label, keep_req in (("kept", True), ("dropped", False)):
            keep = _effective_residual(ckpt, keep_req)
            _, r, _ = _extract_for(ckpt, sample, False)
            out = generate(ckpt.params, cfg, ckpt.quantizer, attrs, Mode.ABLATE_BOTH,
                           residual=r if keep else None)
            realized = recover_pitch_track(out.grid, factors_shifted, cfg.t_frames,
                                           cfg.f_bins, cfg.ranges)
            aae[label].append(float(np.abs(realized - target).mean()))
            mean_real[label].append(float(realized.mean()))
            mse[label].append(reconstruction_error(grid_target, out.grid))
    return {
        "shift_percent": float(shift_percent),
        "mean_target_bin": float(np.mean(mean_target)),
        "mean_realized_kept": float(np.mean(mean_real["kept"])),
        "mean_realized_dropped": float(np.mean(mean_real["dropped"])),
        "aae_kept": float(np.mean(aae["kept"])),
        "aae_dropped": float(np.mean(aae["dropped"])),
        "mse_kept": float(np.mean(mse["kept"])),
        "mse_dropped": float(np.mean(mse["dropped"])),
    }


def write_pitch_rows(rows, csv_path: str) -> None:
    header = ["shift_percent", "mean_target_bin", "mean_realized_kept",
              "mean_realized_dropped", "aae_kept", "aae_dropped",
              "mse_kept", "mse_dropped"]
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(row[k]) for k in header))
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(_json_sibling(csv_path), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(rows, sort_keys=True) + "\n")


def denoise_eval(ckpt: Checkpoint, corpus: Corpus, max_samples: int | None = None):
    """Noise-token deactivation on noisy held-out samples.

    For each noisy sample, generates with attributes + residual + noise
    tokens and again with the noise tokens deactivated; reports the mean
    surviving noise-pattern energy and the MSE against the clean twin.
    """
    cfg = ckpt.model
    if cfg.n_noise < 1:
        raise ValueError("model was trained without noise residual tokens")
    samples = [s for s in heldout_samples(corpus, ckpt.seed) if s.factors.noise_present]
    if max_samples is not None:
        samples = samples[:max_samples]
    if not samples:
        raise ValueError("no noisy held-out samples to evaluate")
    proj = {"kept": [], "deactivated": []}
    mse_clean = {"kept": [], "deactivated": []}
    for sample in samples:
        clean = clean_twin(sample, cfg.t_frames, cfg.f_bins, cfg.ranges)
        attrs = quantize_attributes(sample.factors, cfg.ranges)
        keep = _effective_residual(ckpt, True)
        _, r, rn = _extract_for(ckpt, sample, True)
        for label, noise_tokens in (("kept", rn), ("deactivated", None)):
            out = generate(ckpt.params, cfg, ckpt.quantizer, attrs, Mode.ABLATE_BOTH,
                           residual=r if keep else None,
                           noise_residual=noise_tokens if keep else None)
            proj[label].append(noise_energy_projection(out.grid, sample.factors.noise_seed))
            mse_clean[label].append(reconstruction_error(clean.grid, out.grid))
    return {
        "n_samples": len(samples),
        "noise_projection_kept": float(np.mean(proj["kept"])),
        "noise_projection_deactivated": float(np.mean(proj["deactivated"])),
        "mse_clean_kept": float(np.mean(mse_clean["kept"])),
        "mse_clean_deactivated": float(np.mean(mse_clean["deactivated"])),
    }


def write_denoise(record, csv_path: str) -> None:
    header = ["noise_projection_kept", "noise_projection_deactivated",
              "mse_clean_kept", "mse_clean_deactivated", "n_samples"]
    lines = [",".join(header), ",".join(repr(record[k]) for k in header)]
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(_json_sibling(csv_path), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
