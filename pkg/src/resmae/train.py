"""Training loop: masking, forward, cross-entropy, residual dropout,
the mutual-information penalty, and the optimizer.

The objective is the mean cross-entropy over masked grid positions, plus
the mean over masked attribute positions with the four streams weighted
equally, plus ``lam_mi * max(0, club_estimate)`` computed on the pooled
residual/noise token pairs of the batch's noisy samples.  The optimizer
is Adam with decoupled weight decay (moment estimates with bias
correction; the decay term applied directly to the parameters).

Determinism contract: with a fixed (config, seed, corpus), a fixed
kernel backend, and single-threaded execution, two runs produce
bitwise-identical parameters and metrics logs.  RNG consumption order
per example: grid mask, the four attribute masks in canonical order,
then one gate draw.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import backends as K
from .club import (CLUB_PARAM_NAMES, club_estimate, club_penalty_with_grads,
                   fit_conditional_step, pool_tokens)
from .config import HELDOUT_FRACTION, STREAM_INIT, STREAM_TRAIN, heldout_mask, substream
from .masking import (DropoutGate, MaskConfig, MaskRatios, residual_dropout_gate,
                      sample_training_masks)
from .model import (ModelConfig, embed_full_grid, extract_pair, extract_pair_backward,
                    backward_core, forward_core, grid_embedding_backward, init_params,
                    zero_grads)
from .quantizer import ATTR_STREAMS, AttributeTokens, fit_mel_quantizer, quantize_attributes, quantize_mel
from .synth import load_corpus


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; a diagnostic record was logged."""


@dataclass(frozen=True)
class TrainConfig:
    corpus_path: str = ""
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    epochs: int = 12
    batch_size: int = 32
    lr: float = 3e-4
    weight_decay: float = 0.01
    mel_mask_ratio: float = 0.5
    attr_mask_ratio: float = 0.5
    tau: float = 0.5
    lam_mi: float = 0.1
    q_lr: float = 1e-3
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def ratios(self) -> MaskRatios:
        a = self.attr_mask_ratio
        return MaskRatios(mel=self.mel_mask_ratio, pitch=a, loudness=a, speaker=a, content=a)

    def snapshot(self) -> dict[str, str]:
        """Flat text form stored in checkpoints."""
        m = self.model
        out = {
            "corpus_path": self.corpus_path,
            "epochs": str(self.epochs), "batch_size": str(self.batch_size),
            "lr": repr(self.lr), "weight_decay": repr(self.weight_decay),
            "mel_mask_ratio": repr(self.mel_mask_ratio),
            "attr_mask_ratio": repr(self.attr_mask_ratio),
            "tau": repr(self.tau), "lam_mi": repr(self.lam_mi),
            "q_lr": repr(self.q_lr), "seed": str(self.seed),
            "d": str(m.d), "enc_layers": str(m.enc_layers), "dec_layers": str(m.dec_layers),
            "heads": str(m.heads), "n_residual": str(m.n_residual), "n_noise": str(m.n_noise),
            "v_bins": str(m.v_bins), "t_frames": str(m.t_frames), "f_bins": str(m.f_bins),
            "pitch_bins": str(m.ranges.pitch_bins), "loudness_bins": str(m.ranges.loudness_bins),
            "speakers": str(m.ranges.speakers), "content": str(m.ranges.content),
            "ff_mult": str(m.ff_mult), "club_hidden": str(m.club_hidden), "dtype": m.dtype,
        }
        return out


class AdamW:
    """Adam with decoupled weight decay over a name-keyed parameter dict."""

    def __init__(self, params, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8,
                 names=None, exclude_prefix=None):
        if names is None:
            names = [n for n in sorted(params)
                     if exclude_prefix is None or not n.startswith(exclude_prefix)]
        self.names = list(names)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for n in self.names:
            K.adamw_update(params[n].ravel(), grads[n].ravel(),
                           self.m[n].ravel(), self.v[n].ravel(), self.t,
                           self.lr, self.betas[0], self.betas[1], self.eps,
                           self.weight_decay)


@dataclass
class TrainItem:
    """One example prepared for a training step."""

    mel_tokens: np.ndarray
    attrs: AttributeTokens
    mask_cfg: MaskConfig
    keep_residual: bool
    keep_noise: bool


def _masked_targets(item: TrainItem, name: str):
    if name == "mel":
        flat = np.flatnonzero(item.mask_cfg.mel.ravel())
        return item.mel_tokens.ravel()[flat]
    pos = np.flatnonzero(item.mask_cfg.attrs[name])
    return item.attrs.stream(name)[pos]


def _ce_denominators(items):
    n_mel = sum(it.mask_cfg.n_masked_mel() for it in items)
    n_attr = {name: sum(it.mask_cfg.n_masked_attr(name) for it in items)
              for name in ATTR_STREAMS}
    active = [name for name in ATTR_STREAMS if n_attr[name] > 0]
    return n_mel, n_attr, active


def batch_loss_and_grads(params, cfg: ModelConfig, items, lam: float,
                         want_grads: bool = True):
    """Loss, per-stream components, gradients, and the pooled token pairs.

    The returned gradient dict covers every parameter, including the
    conditional model's contribution through the penalty term (the main
    optimizer ignores those entries; the conditional model is fitted by
    its own likelihood step).
    """
    extractions = []
    for it in items:
        grid_emb = embed_full_grid(params, cfg, it.mel_tokens)
        if it.keep_residual:
            r, rn, ex_cache = extract_pair(params, cfg, grid_emb, it.keep_noise)
        else:
            r = rn = ex_cache = None
        extractions.append((grid_emb, r, rn, ex_cache))

    club_idx = [i for i, it in enumerate(items) if it.keep_residual and it.keep_noise]
    club_val = 0.0
    club_dx = club_dy = None
    pooled = None
    if len(club_idx) >= 2:
        x = np.stack([pool_tokens(extractions[i][1]) for i in club_idx])
        y = np.stack([pool_tokens(extractions[i][2]) for i in club_idx])
        pooled = (x, y)
        if want_grads:
            club_val, club_dx, club_dy, club_qg = club_penalty_with_grads(params, x, y)
        else:
            club_val = club_estimate(params, x, y)

    grads = zero_grads(params) if want_grads else None
    penalty_active = club_val > 0.0
    if want_grads and pooled is not None and penalty_active:
        for name in CLUB_PARAM_NAMES:
            grads[name] += lam * club_qg[name]

    n_mel, n_attr, active = _ce_denominators(items)
    ce_mel = 0.0
    ce_attr = {name: 0.0 for name in ATTR_STREAMS}
    for i, it in enumerate(items):
        grid_emb, r, rn, ex_cache = extractions[i]
        logits, cache = forward_core(params, cfg, it.mel_tokens, it.attrs, it.mask_cfg,
                                     residual=r, noise_residual=rn, grid_emb=grid_emb,
                                     want_cache=want_grads)
        dlogits = {}
        for name, lg in logits.items():
            targets = _masked_targets(it, name)
            losses, probs = K.softmax_xent(lg, targets)
            if name == "mel":
                ce_mel += float(losses.sum(dtype=np.float64))
                scale = 1.0 / n_mel
            else:
                ce_attr[name] += float(losses.sum(dtype=np.float64))
                scale = 1.0 / (len(active) * n_attr[name])
            if want_grads:
                dl = probs
                dl[np.arange(len(targets)), targets] -= 1.0
                dl *= scale
                dlogits[name] = dl
        if want_grads:
            d_grid, dr, drn = backward_core(params, cfg, cache, dlogits, grads)
            if penalty_active and i in club_idx:
                j = club_idx.index(i)
                dr = dr + (lam / cfg.n_residual) * club_dx[j][None, :]
                drn = drn + (lam / cfg.n_noise) * club_dy[j][None, :]
            if it.keep_residual:
                d_from_ex = extract_pair_backward(params, cfg, ex_cache, dr, drn, grads)
                d_grid = d_from_ex if d_grid is None else d_grid + d_from_ex
            if d_grid is not None:
                grid_embedding_backward(params, cfg, it.mel_tokens, d_grid, grads)

    mel_term = ce_mel / n_mel if n_mel else 0.0
    attr_term = (sum(ce_attr[name] / n_attr[name] for name in active) / len(active)
                 if active else 0.0)
    loss = mel_term + attr_term + lam * max(0.0, club_val)
    components = {"ce_mel": mel_term, "club": club_val,
                  "penalty": lam * max(0.0, club_val)}
    for name in ATTR_STREAMS:
        components[f"ce_{name}"] = ce_attr[name] / n_attr[name] if n_attr[name] else 0.0
    return loss, components, grads, pooled


def compute_loss(logits, targets, mask_configs, club_value: float, lam: float):
    """Objective from already-pooled logits (one array per stream).

    ``logits[stream]`` must cover exactly the masked positions of that
    stream across ``mask_configs``, in order.  Returns (total, components).
    """
    counts = {"mel": sum(mc.n_masked_mel() for mc in mask_configs)}
    for name in ATTR_STREAMS:
        counts[name] = sum(mc.n_masked_attr(name) for mc in mask_configs)
    sums = {}
    for name, n in counts.items():
        rows = logits.get(name)
        given = 0 if rows is None else rows.shape[0]
        if given != n:
            raise ValueError(f"{name}: got {given} logit rows for {n} masked positions")
        if n:
            losses, _ = K.softmax_xent(rows, np.asarray(targets[name]))
            sums[name] = float(losses.sum(dtype=np.float64))
    mel_term = sums.get("mel", 0.0) / counts["mel"] if counts["mel"] else 0.0
    active = [name for name in ATTR_STREAMS if counts[name] > 0]
    attr_term = (sum(sums[name] / counts[name] for name in active) / len(active)
                 if active else 0.0)
    total = mel_term + attr_term + lam * max(0.0, club_value)
    components = {"ce_mel": mel_term, "penalty": lam * max(0.0, club_value)}
    for name in ATTR_STREAMS:
        components[f"ce_{name}"] = sums.get(name, 0.0) / counts[name] if counts[name] else 0.0
    return total, components


def _metrics_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True)


def train(cfg: TrainConfig):
    """Run the full loop; returns (checkpoint, metrics records).

    The metrics log gets one record per epoch.  The held-out tenth of the
    corpus (seed-stable hash split) is never trained on.
    """
    from .checkpoint import Checkpoint, save_checkpoint

    corpus = load_corpus(cfg.corpus_path)
    m = cfg.model
    if (corpus.t_frames, corpus.f_bins) != (m.t_frames, m.f_bins):
        raise ValueError(f"corpus grid {corpus.t_frames}x{corpus.f_bins} does not match "
                         f"model {m.t_frames}x{m.f_bins}")
    if corpus.ranges != m.ranges:
        raise ValueError("corpus factor ranges do not match the model config")

    held = heldout_mask(len(corpus), cfg.seed)
    train_idx = np.flatnonzero(~held)
    quantizer = fit_mel_quantizer((corpus.samples[i].grid for i in train_idx), m.v_bins)
    tokens = [quantize_mel(corpus.samples[i].grid, quantizer) for i in train_idx]
    attrs = [quantize_attributes(corpus.samples[i].factors, corpus.ranges) for i in train_idx]
    noisy = [corpus.samples[i].factors.noise_present for i in train_idx]

    params = init_params(m, substream(cfg.seed, STREAM_INIT))
    opt = AdamW(params, cfg.lr, cfg.weight_decay, exclude_prefix="club.")
    q_opt = AdamW(params, cfg.q_lr, 0.0, names=CLUB_PARAM_NAMES)
    rng = substream(cfg.seed, STREAM_TRAIN)
    gate = DropoutGate(cfg.tau)
    ratios = cfg.ratios()

    metrics: list[dict] = []
    log_fh = open(cfg.metrics_path, "w", encoding="utf-8") if cfg.metrics_path else None
    try:
        n_train = len(train_idx)
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n_train)
            tot_loss = 0.0
            tot = {k: 0.0 for k in ("ce_mel", "ce_pitch", "ce_loudness", "ce_speaker",
                                    "ce_content", "club", "penalty")}
            n_batches = 0
            n_drop = 0
            q_nll_sum = 0.0
            q_steps = 0
            for lo in range(0, n_train, cfg.batch_size):
                chunk = perm[lo:lo + cfg.batch_size]
                items = []
                for j in chunk:
                    mask_cfg = sample_training_masks(ratios, m.t_frames, m.f_bins, rng)
                    u = float(rng.random())
                    keep = residual_dropout_gate(gate, u) == "keep"
                    if not keep:
                        n_drop += 1
                    items.append(TrainItem(tokens[j], attrs[j], mask_cfg, keep,
                                           keep and noisy[j] and m.n_noise > 0))
                loss, comps, grads, pooled = batch_loss_and_grads(params, m, items, cfg.lam_mi)
                if not math.isfinite(loss):
                    record = {"epoch": epoch, "error": "non_finite_loss",
                              "batch_start": int(lo)}
                    metrics.append(record)
                    if log_fh:
                        log_fh.write(_metrics_line(record) + "\n")
                    raise TrainingDivergedError(f"non-finite loss in epoch {epoch}")
                opt.step(params, grads)
                if pooled is not None:
                    q_nll_sum += fit_conditional_step(params, pooled[0], pooled[1], q_opt)
                    q_steps += 1
                tot_loss += loss
                for k in tot:
                    tot[k] += comps.get(k, 0.0)
                n_batches += 1
            record = {"epoch": epoch, "loss": tot_loss / n_batches,
                      "gate_drop_fraction": n_drop / n_train,
                      "q_nll": q_nll_sum / q_steps if q_steps else None}
            for k in tot:
                record[k] = tot[k] / n_batches
            metrics.append(record)
            if log_fh:
                log_fh.write(_metrics_line(record) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()

    ckpt = Checkpoint(params=params, quantizer=quantizer, model=m,
                      train_snapshot=cfg.snapshot(), epoch=cfg.epochs,
                      rng_state=rng.bit_generator.state)
    if cfg.checkpoint_path:
        save_checkpoint(ckpt, cfg.checkpoint_path)
    return ckpt, metrics
