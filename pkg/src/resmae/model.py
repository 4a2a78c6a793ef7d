"""The masked autoencoder over grid, attribute, and residual streams.

Sequence layout (global slot indices, fixed): the T*F grid cells in
row-major order, then the four attribute streams (pitch, loudness,
speaker, content) each of length T, then the residual token slots when
kept, then the noise-residual slots when kept.  Visible tokens are
embedded and encoded; masked discrete slots are filled with a learned
mask embedding before decoding; per-stream linear heads predict the
vocabulary at the originally-masked positions.  Residual tokens are
inputs only and never receive a prediction head.

Residual tokens are produced by latent-query cross-attention over the
embeddings of the full (unmasked) grid: keys and values are learned
projections of the grid embeddings, attention weights are the row
softmax of Q K^T / sqrt(d), and the token set is the weight matrix
applied to the values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import backends as K
from .layers import stack_bwd, stack_fwd
from .masking import MaskConfig, Mode, inference_mask
from .quantizer import ATTR_STREAMS, AttributeTokens, MelQuantizer, dequantize_mel, quantize_mel
from .synth import FactorRanges

STREAMS = ("mel",) + ATTR_STREAMS
TYPE_IDS = {"mel": 0, "pitch": 1, "loudness": 2, "speaker": 3, "content": 4,
            "residual": 5, "noise": 6}
N_TYPES = 7
INIT_SCALE = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    n_residual: int = 8
    n_noise: int = 4
    v_bins: int = 64
    t_frames: int = 32
    f_bins: int = 32
    ranges: FactorRanges = field(default_factory=FactorRanges)
    ff_mult: int = 4
    club_hidden: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.n_residual < 1:
            raise ValueError("n_residual must be >= 1")
        if self.n_noise < 0:
            raise ValueError("n_noise must be >= 0")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def vocab(self, stream: str) -> int:
        r = self.ranges
        return {"mel": self.v_bins, "pitch": r.pitch_bins, "loudness": r.loudness_bins,
                "speaker": r.speakers, "content": r.content}[stream]

    @property
    def n_grid(self) -> int:
        return self.t_frames * self.f_bins

    def attr_offset(self, stream: str) -> int:
        return self.n_grid + ATTR_STREAMS.index(stream) * self.t_frames

    @property
    def n_discrete(self) -> int:
        return self.n_grid + 4 * self.t_frames


def desk_config(**overrides) -> ModelConfig:
    """Laptop-scale defaults used by the whole verification suite."""
    return replace(ModelConfig(), **overrides) if overrides else ModelConfig()


def paper_config(**overrides) -> ModelConfig:
    """Full-scale preset (not a verification target on CPU)."""
    cfg = ModelConfig(d=512, enc_layers=6, dec_layers=6, heads=8,
                      n_residual=25, n_noise=1, club_hidden=512)
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class CrossAttentionTrace:
    """Keys, values, and the row-stochastic attention weight matrix."""

    keys: np.ndarray
    values: np.ndarray
    weights: np.ndarray


@dataclass
class ResidualTokenSet:
    tokens: np.ndarray
    noise_tokens: np.ndarray | None = None


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter dict; includes the CLUB conditional model under "club.*"."""
    dt = cfg.np_dtype
    d = cfg.d

    def norm(*shape):
        return (rng.standard_normal(shape) * INIT_SCALE).astype(dt)

    p: dict[str, np.ndarray] = {}
    for s in STREAMS:
        p[f"embed.{s}"] = norm(cfg.vocab(s), d)
    p["embed.time"] = norm(cfg.t_frames, d)
    p["embed.freq"] = norm(cfg.f_bins, d)
    p["embed.type"] = norm(N_TYPES, d)
    p["embed.mask"] = norm(d)
    p["extract.q"] = norm(cfg.n_residual, d)
    if cfg.n_noise > 0:
        p["extract.q_noise"] = norm(cfg.n_noise, d)
    p["extract.w_key"] = norm(d, d)
    p["extract.w_value"] = norm(d, d)
    for stack, n in (("enc", cfg.enc_layers), ("dec", cfg.dec_layers)):
        for i in range(n):
            pre = f"{stack}.{i}"
            p[f"{pre}.ln1.g"] = np.ones(d, dtype=dt)
            p[f"{pre}.ln1.b"] = np.zeros(d, dtype=dt)
            p[f"{pre}.attn.w_qkv"] = norm(d, 3 * d)
            p[f"{pre}.attn.b_qkv"] = np.zeros(3 * d, dtype=dt)
            p[f"{pre}.attn.w_out"] = norm(d, d)
            p[f"{pre}.attn.b_out"] = np.zeros(d, dtype=dt)
            p[f"{pre}.ln2.g"] = np.ones(d, dtype=dt)
            p[f"{pre}.ln2.b"] = np.zeros(d, dtype=dt)
            p[f"{pre}.ff.w1"] = norm(d, cfg.ff_mult * d)
            p[f"{pre}.ff.b1"] = np.zeros(cfg.ff_mult * d, dtype=dt)
            p[f"{pre}.ff.w2"] = norm(cfg.ff_mult * d, d)
            p[f"{pre}.ff.b2"] = np.zeros(d, dtype=dt)
    for s in STREAMS:
        p[f"head.{s}.w"] = norm(d, cfg.vocab(s))
        p[f"head.{s}.b"] = np.zeros(cfg.vocab(s), dtype=dt)
    h = cfg.club_hidden
    p["club.w1"] = norm(d, h)
    p["club.b1"] = np.zeros(h, dtype=dt)
    p["club.w_mu"] = norm(h, d)
    p["club.b_mu"] = np.zeros(d, dtype=dt)
    p["club.w_lv"] = norm(h, d)
    p["club.b_lv"] = np.zeros(d, dtype=dt)
    return p


def zero_grads(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _check_tokens(name, tokens, vocab):
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise ValueError(f"{name} tokens outside vocabulary [0, {vocab})")


def grid_indices(cfg: ModelConfig):
    t_idx = np.repeat(np.arange(cfg.t_frames), cfg.f_bins)
    f_idx = np.tile(np.arange(cfg.f_bins), cfg.t_frames)
    return t_idx, f_idx


def embed_full_grid(params, cfg: ModelConfig, mel_tokens) -> np.ndarray:
    """(T*F, d) embeddings of the full grid: codebook + time + freq + stream type."""
    _check_tokens("mel", mel_tokens, cfg.v_bins)
    flat = np.asarray(mel_tokens, dtype=np.int64).ravel()
    t_idx, f_idx = grid_indices(cfg)
    e = params["embed.mel"][flat] + params["embed.time"][t_idx]
    e += params["embed.freq"][f_idx]
    e += params["embed.type"][TYPE_IDS["mel"]]
    return e


def grid_embedding_backward(params, cfg: ModelConfig, mel_tokens, d_grid, grads) -> None:
    flat = np.asarray(mel_tokens, dtype=np.int64).ravel()
    t_idx, f_idx = grid_indices(cfg)
    K.add_rows_at(grads["embed.mel"], flat, d_grid)
    K.add_rows_at(grads["embed.time"], t_idx, d_grid)
    K.add_rows_at(grads["embed.freq"], f_idx, d_grid)
    grads["embed.type"][TYPE_IDS["mel"]] += d_grid.sum(axis=0)


def _embed_attr(params, cfg: ModelConfig, name: str, tokens) -> np.ndarray:
    _check_tokens(name, tokens, cfg.vocab(name))
    tokens = np.asarray(tokens, dtype=np.int64)
    e = params[f"embed.{name}"][tokens] + params["embed.time"][np.arange(cfg.t_frames)]
    e += params["embed.type"][TYPE_IDS[name]]
    return e


def residual_extract(grid_embeddings, queries, w_key, w_value):
    """Latent-query cross-attention pooling of the grid embeddings.

    Returns (tokens, trace) with tokens = weights @ values.  Every row of
    the weight matrix is a softmax over the input positions.
    """
    grid_embeddings = np.asarray(grid_embeddings)
    if grid_embeddings.shape[0] == 0:
        raise ValueError("residual extraction needs a nonempty input sequence")
    d = queries.shape[1]
    keys = grid_embeddings @ w_key
    values = grid_embeddings @ w_value
    scores = (queries @ keys.T) * (1.0 / math.sqrt(d))
    weights = K.softmax_rows(scores)
    assert np.all(weights >= 0.0)
    assert np.allclose(weights.sum(axis=1, dtype=np.float64), 1.0, atol=1e-6)
    tokens = weights @ values
    return tokens, CrossAttentionTrace(keys=keys, values=values, weights=weights)


def extract_pair(params, cfg: ModelConfig, grid_emb, want_noise: bool):
    """Speech and (optionally) noise residual tokens with a shared key/value map."""
    if grid_emb.shape[0] == 0:
        raise ValueError("residual extraction needs a nonempty input sequence")
    inv = 1.0 / math.sqrt(cfg.d)
    keys = grid_emb @ params["extract.w_key"]
    values = grid_emb @ params["extract.w_value"]
    weights = K.softmax_rows((params["extract.q"] @ keys.T) * inv)
    tokens = weights @ values
    noise_tokens = None
    noise_weights = None
    if want_noise:
        if cfg.n_noise == 0:
            raise ValueError("model has no noise residual tokens (n_noise=0)")
        noise_weights = K.softmax_rows((params["extract.q_noise"] @ keys.T) * inv)
        noise_tokens = noise_weights @ values
    cache = (grid_emb, keys, values, weights, noise_weights)
    return tokens, noise_tokens, cache


def extract_pair_backward(params, cfg: ModelConfig, cache, d_tokens, d_noise, grads):
    """Backward of extract_pair; returns the gradient w.r.t. the grid embeddings."""
    grid_emb, keys, values, weights, noise_weights = cache
    inv = 1.0 / math.sqrt(cfg.d)
    d_values = weights.T @ d_tokens if d_tokens is not None else None
    d_keys = None
    if d_tokens is not None:
        dw = d_tokens @ values.T
        ds = K.softmax_rows_grad(weights, dw)
        grads["extract.q"] += (ds @ keys) * inv
        d_keys = (ds.T @ params["extract.q"]) * inv
    if d_noise is not None:
        dwn = d_noise @ values.T
        dsn = K.softmax_rows_grad(noise_weights, dwn)
        grads["extract.q_noise"] += (dsn @ keys) * inv
        dkn = (dsn.T @ params["extract.q_noise"]) * inv
        d_keys = dkn if d_keys is None else d_keys + dkn
        dvn = noise_weights.T @ d_noise
        d_values = dvn if d_values is None else d_values + dvn
    d_grid = np.zeros_like(grid_emb)
    if d_keys is not None:
        d_grid += d_keys @ params["extract.w_key"].T
        grads["extract.w_key"] += grid_emb.T @ d_keys
    if d_values is not None:
        d_grid += d_values @ params["extract.w_value"].T
        grads["extract.w_value"] += grid_emb.T @ d_values
    return d_grid


def embed_streams(params, cfg: ModelConfig, mel_tokens, attrs: AttributeTokens,
                  mask_cfg: MaskConfig, grid_emb=None):
    """Embeddings of the visible discrete tokens, in canonical slot order.

    Returns (rows, slots, meta): one embedding per visible token, the
    global slot index of each row, and the per-stream bookkeeping used by
    the backward pass.
    """
    mask_cfg.validate_shapes(cfg.t_frames, cfg.f_bins)
    mel_vis = np.flatnonzero(~mask_cfg.mel.ravel())
    parts = []
    slots = [mel_vis]
    if mel_vis.size:
        if grid_emb is None:
            if mel_tokens is None:
                raise ValueError("mel stream has visible cells but no tokens were given")
            grid_emb = embed_full_grid(params, cfg, mel_tokens)
        parts.append(grid_emb[mel_vis])
    attr_vis = {}
    attr_tokens = {}
    for name in ATTR_STREAMS:
        vis = np.flatnonzero(~mask_cfg.attrs[name])
        attr_vis[name] = vis
        if vis.size:
            tokens = np.asarray(attrs.stream(name), dtype=np.int64)
            attr_tokens[name] = tokens
            parts.append(_embed_attr(params, cfg, name, tokens)[vis])
            slots.append(cfg.attr_offset(name) + vis)
    rows = (np.concatenate(parts, axis=0) if parts
            else np.zeros((0, cfg.d), dtype=cfg.np_dtype))
    slot_arr = np.concatenate([s for s in slots if len(s)], axis=0) if rows.shape[0] \
        else np.zeros(0, dtype=np.int64)
    meta = {"mel_vis": mel_vis, "attr_vis": attr_vis, "grid_emb": grid_emb,
            "attr_tokens": attr_tokens}
    return rows, slot_arr.astype(np.int64), meta


def _mask_fill_rows(params, cfg: ModelConfig, mask_cfg: MaskConfig):
    """Mask-token rows and their global slots for every masked discrete position."""
    rows = []
    slots = []
    t_idx, f_idx = grid_indices(cfg)
    mel_masked = np.flatnonzero(mask_cfg.mel.ravel())
    if mel_masked.size:
        r = params["embed.mask"] + params["embed.type"][TYPE_IDS["mel"]] \
            + params["embed.time"][t_idx[mel_masked]] + params["embed.freq"][f_idx[mel_masked]]
        rows.append(r)
        slots.append(mel_masked)
    masked_attr = {}
    for name in ATTR_STREAMS:
        pos = np.flatnonzero(mask_cfg.attrs[name])
        masked_attr[name] = pos
        if pos.size:
            r = params["embed.mask"] + params["embed.type"][TYPE_IDS[name]] \
                + params["embed.time"][pos]
            rows.append(r)
            slots.append(cfg.attr_offset(name) + pos)
    fill = np.concatenate(rows, axis=0) if rows else np.zeros((0, cfg.d), dtype=cfg.np_dtype)
    slot_arr = np.concatenate(slots, axis=0).astype(np.int64) if slots \
        else np.zeros(0, dtype=np.int64)
    return fill, slot_arr, mel_masked, masked_attr


def forward_core(params, cfg: ModelConfig, mel_tokens, attrs: AttributeTokens,
                 mask_cfg: MaskConfig, residual=None, noise_residual=None,
                 grid_emb=None, want_cache=False):
    """Encode visible tokens, complete with mask tokens, decode, predict.

    ``residual`` / ``noise_residual`` are injected token sets (or None for
    dropped).  Returns (logits, cache); logits maps each stream with at
    least one masked position to an (n_masked, vocab) array.
    """
    enc_rows, enc_slots, meta = embed_streams(params, cfg, mel_tokens, attrs,
                                              mask_cfg, grid_emb=grid_emb)
    res_slot0 = cfg.n_discrete
    seq_parts = [enc_rows]
    slot_parts = [enc_slots]
    n_res = 0
    if residual is not None:
        res = residual + params["embed.type"][TYPE_IDS["residual"]]
        n_res = res.shape[0]
        seq_parts.append(res)
        slot_parts.append(res_slot0 + np.arange(n_res))
    if noise_residual is not None:
        nres = noise_residual + params["embed.type"][TYPE_IDS["noise"]]
        seq_parts.append(nres)
        slot_parts.append(res_slot0 + n_res + np.arange(nres.shape[0]))
    enc_in = np.concatenate(seq_parts, axis=0)
    enc_slot_map = np.concatenate(slot_parts, axis=0).astype(np.int64)

    if enc_in.shape[0]:
        enc_out, enc_caches = stack_fwd(enc_in, params, "enc", cfg.enc_layers, cfg.heads)
    else:
        enc_out, enc_caches = enc_in, []

    fill, fill_slots, mel_masked, masked_attr = _mask_fill_rows(params, cfg, mask_cfg)
    n_extra = (0 if residual is None else residual.shape[0]) \
        + (0 if noise_residual is None else noise_residual.shape[0])
    l_dec = cfg.n_discrete + n_extra
    dec_in = np.empty((l_dec, cfg.d), dtype=cfg.np_dtype)
    if enc_slot_map.size + fill_slots.size != l_dec:
        raise ValueError("mask config inconsistent with sequence layout")
    dec_in[enc_slot_map] = enc_out
    dec_in[fill_slots] = fill

    dec_out, dec_caches = stack_fwd(dec_in, params, "dec", cfg.dec_layers, cfg.heads)

    logits = {}
    head_rows = {}
    if mel_masked.size:
        rows = dec_out[mel_masked]
        head_rows["mel"] = rows
        logits["mel"] = rows @ params["head.mel.w"] + params["head.mel.b"]
    for name in ATTR_STREAMS:
        pos = masked_attr[name]
        if pos.size:
            rows = dec_out[cfg.attr_offset(name) + pos]
            head_rows[name] = rows
            logits[name] = rows @ params[f"head.{name}.w"] + params[f"head.{name}.b"]

    cache = None
    if want_cache:
        cache = {
            "meta": meta, "enc_in": enc_in, "enc_caches": enc_caches,
            "enc_slot_map": enc_slot_map, "fill_slots": fill_slots,
            "mel_masked": mel_masked, "masked_attr": masked_attr,
            "dec_caches": dec_caches, "dec_out": dec_out, "head_rows": head_rows,
            "n_res": 0 if residual is None else residual.shape[0],
            "n_noise": 0 if noise_residual is None else noise_residual.shape[0],
            "mask_cfg": mask_cfg,
        }
    return logits, cache


def backward_core(params, cfg: ModelConfig, cache, dlogits, grads):
    """Backprop from per-stream logit grads down to the embedding tables.

    Returns (d_grid, d_residual, d_noise): the gradient w.r.t. the full
    grid embeddings (None when the grid was never embedded) and w.r.t.
    the injected residual token sets (None when absent).
    """
    meta = cache["meta"]
    dec_out = cache["dec_out"]
    d_dec_out = np.zeros_like(dec_out)
    if "mel" in dlogits and dlogits["mel"] is not None and cache["mel_masked"].size:
        dlog = dlogits["mel"]
        rows = cache["head_rows"]["mel"]
        grads["head.mel.w"] += rows.T @ dlog
        grads["head.mel.b"] += dlog.sum(axis=0)
        d_dec_out[cache["mel_masked"]] += dlog @ params["head.mel.w"].T
    for name in ATTR_STREAMS:
        pos = cache["masked_attr"][name]
        if name in dlogits and dlogits[name] is not None and pos.size:
            dlog = dlogits[name]
            rows = cache["head_rows"][name]
            grads[f"head.{name}.w"] += rows.T @ dlog
            grads[f"head.{name}.b"] += dlog.sum(axis=0)
            d_dec_out[cfg.attr_offset(name) + pos] += dlog @ params[f"head.{name}.w"].T

    d_dec_in = stack_bwd(d_dec_out, cache["dec_caches"], params, "dec", cfg.heads, grads)

    # mask-token fills
    fill_slots = cache["fill_slots"]
    if fill_slots.size:
        d_fill = d_dec_in[fill_slots]
        grads["embed.mask"] += d_fill.sum(axis=0)
        t_idx, f_idx = grid_indices(cfg)
        mel_masked = cache["mel_masked"]
        n_mel = mel_masked.size
        if n_mel:
            dm = d_fill[:n_mel]
            grads["embed.type"][TYPE_IDS["mel"]] += dm.sum(axis=0)
            K.add_rows_at(grads["embed.time"], t_idx[mel_masked], dm)
            K.add_rows_at(grads["embed.freq"], f_idx[mel_masked], dm)
        off = n_mel
        for name in ATTR_STREAMS:
            pos = cache["masked_attr"][name]
            if pos.size:
                da = d_fill[off:off + pos.size]
                off += pos.size
                grads["embed.type"][TYPE_IDS[name]] += da.sum(axis=0)
                K.add_rows_at(grads["embed.time"], pos, da)

    # encoder pathway
    d_enc_out = d_dec_in[cache["enc_slot_map"]]
    if cache["enc_in"].shape[0]:
        d_enc_in = stack_bwd(d_enc_out, cache["enc_caches"], params, "enc", cfg.heads, grads)
    else:
        d_enc_in = d_enc_out

    mel_vis = meta["mel_vis"]
    d_grid = None
    off = 0
    if mel_vis.size:
        d_grid = np.zeros_like(meta["grid_emb"])
        d_grid[mel_vis] = d_enc_in[:mel_vis.size]
        off = mel_vis.size
    for name in ATTR_STREAMS:
        vis = meta["attr_vis"][name]
        if vis.size:
            da = d_enc_in[off:off + vis.size]
            off += vis.size
            tokens = meta["attr_tokens"][name][vis]
            K.add_rows_at(grads[f"embed.{name}"], tokens, da)
            K.add_rows_at(grads["embed.time"], vis, da)
            grads["embed.type"][TYPE_IDS[name]] += da.sum(axis=0)
    d_residual = None
    if cache["n_res"]:
        d_residual = d_enc_in[off:off + cache["n_res"]].copy()
        grads["embed.type"][TYPE_IDS["residual"]] += d_residual.sum(axis=0)
        off += cache["n_res"]
    d_noise = None
    if cache["n_noise"]:
        d_noise = d_enc_in[off:off + cache["n_noise"]].copy()
        grads["embed.type"][TYPE_IDS["noise"]] += d_noise.sum(axis=0)
        off += cache["n_noise"]
    return d_grid, d_residual, d_noise


def forward(params, cfg: ModelConfig, mel_tokens, attrs: AttributeTokens,
            mask_cfg: MaskConfig, residual_gate: str = "keep",
            noise_gate: str = "keep"):
    """Full forward pass with gate semantics.

    Residual tokens are always extracted from the full (unmasked) grid;
    a dropped gate omits the corresponding token set from the transformer
    input entirely, so dropped-branch parameters receive zero gradient.
    """
    if residual_gate not in ("keep", "drop") or noise_gate not in ("keep", "drop"):
        raise ValueError("gates must be 'keep' or 'drop'")
    residual = noise_residual = None
    grid_emb = None
    if mel_tokens is not None:
        grid_emb = embed_full_grid(params, cfg, mel_tokens)
    if residual_gate == "keep":
        if grid_emb is None:
            raise ValueError("residual extraction requires the full mel token grid")
        want_noise = noise_gate == "keep" and cfg.n_noise > 0
        residual, noise_residual, _ = extract_pair(params, cfg, grid_emb, want_noise)
    logits, _ = forward_core(params, cfg, mel_tokens, attrs, mask_cfg,
                             residual=residual, noise_residual=noise_residual,
                             grid_emb=grid_emb)
    return logits


@dataclass
class GenerationResult:
    grid: np.ndarray
    mel_tokens: np.ndarray
    attr_tokens: dict[str, np.ndarray]


def generate(params, cfg: ModelConfig, q: MelQuantizer, attrs: AttributeTokens,
             mode: Mode | str = Mode.GENERATION, residual=None,
             noise_residual=None) -> GenerationResult:
    """Argmax decoding of the fully-masked grid under a named inference mode.

    Attribute predictions are returned for streams the mode masks.
    """
    mode = Mode(mode)
    mask_cfg = inference_mask(mode, cfg.t_frames, cfg.f_bins)
    logits, _ = forward_core(params, cfg, None, attrs, mask_cfg,
                             residual=residual, noise_residual=noise_residual)
    mel_tok = np.argmax(logits["mel"], axis=1).reshape(cfg.t_frames, cfg.f_bins)
    attr_pred = {}
    for name in ATTR_STREAMS:
        if name in logits:
            attr_pred[name] = np.argmax(logits[name], axis=1)
    return GenerationResult(grid=dequantize_mel(mel_tok, q), mel_tokens=mel_tok,
                            attr_tokens=attr_pred)


def generate_mel(params, cfg: ModelConfig, q: MelQuantizer, attrs: AttributeTokens,
                 residual=None, noise_residual=None) -> np.ndarray:
    """Grid synthesis from attributes (plus optional injected residual tokens)."""
    return generate(params, cfg, q, attrs, Mode.GENERATION,
                    residual=residual, noise_residual=noise_residual).grid


def analyze_attributes(params, cfg: ModelConfig, q: MelQuantizer,
                       grid) -> AttributeTokens:
    """Predict all four attribute streams from a grid (argmax decoding)."""
    mel_tokens = quantize_mel(grid, q)
    grid_emb = embed_full_grid(params, cfg, mel_tokens)
    residual, _, _ = extract_pair(params, cfg, grid_emb, want_noise=False)
    mask_cfg = inference_mask(Mode.ANALYSIS, cfg.t_frames, cfg.f_bins)
    logits, _ = forward_core(params, cfg, mel_tokens, None, mask_cfg,
                             residual=residual, grid_emb=grid_emb)
    preds = {name: np.argmax(logits[name], axis=1) for name in ATTR_STREAMS}
    return AttributeTokens(pitch=preds["pitch"], loudness=preds["loudness"],
                           speaker=preds["speaker"], content=preds["content"],
                           ranges=cfg.ranges)
