"""Command-line surface: data generation, training, analysis, synthesis,
ablation, threshold sweep, and denoising.

Every option can also come from a flat ``key=value`` config file passed
with ``--config``; explicit flags override file values, which override
the ``--preset`` values, which override the built-in defaults.  Unknown
config keys are rejected.  All randomness flows from ``--seed`` (see
:mod:`resmae.config` for the sub-stream derivation rule).

Exit status: 0 on success, 2 for usage errors (bad flags or config
keys), 1 for everything else, with a one-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint
from .config import parse_kv_file
from .evaluate import (ablation_table, denoise_eval, pitch_shift_eval, tau_sweep,
                       write_ablation, write_denoise, write_pitch_rows)
from .masking import ABLATION_MODES, Mode
from .model import ModelConfig, desk_config, extract_pair, embed_full_grid, generate_mel, paper_config, analyze_attributes
from .quantizer import ATTR_STREAMS, AttributeTokens, quantize_mel
from .synth import CorpusFormatError, FactorRanges, generate_corpus, load_corpus, save_corpus
from .train import TrainConfig, TrainingDivergedError, train

# option tables: key -> (type, default, help).  REQUIRED marks mandatory keys.
REQUIRED = object()

_GEN_OPTS = {
    "n": (int, 2000, "number of samples to generate"),
    "seed": (int, 0, "root seed for factor draws and noise assignment"),
    "noise_fraction": (float, 0.0, "fraction of samples rendered with additive noise"),
    "t_frames": (int, 32, "frames per grid"),
    "f_bins": (int, 32, "frequency bins per grid"),
    "pitch_bins": (int, 16, "pitch vocabulary size"),
    "loudness_bins": (int, 8, "loudness vocabulary size"),
    "speakers": (int, 8, "speaker vocabulary size"),
    "content": (int, 16, "content vocabulary size"),
    "workers": (int, 1, "parallel workers for per-sample generation"),
    "out": (str, REQUIRED, "output corpus file (manifest written beside it)"),
}

_TRAIN_OPTS = {
    "corpus": (str, REQUIRED, "input corpus file"),
    "out": (str, REQUIRED, "output checkpoint file"),
    "metrics": (str, None, "metrics log path (default: <out>.metrics.jsonl)"),
    "preset": (str, "desk", "model size preset: desk or paper"),
    "epochs": (int, None, "training epochs (preset default if omitted)"),
    "batch_size": (int, 32, "minibatch size"),
    "lr": (float, 3e-4, "learning rate"),
    "weight_decay": (float, 0.01, "decoupled weight decay coefficient"),
    "mel_mask_ratio": (float, 0.5, "per-cell grid masking probability"),
    "attr_mask_ratio": (float, 0.5, "per-position attribute masking probability"),
    "tau": (float, 0.5, "residual dropout threshold"),
    "lam_mi": (float, 0.1, "weight of the mutual-information penalty"),
    "q_lr": (float, 1e-3, "learning rate of the conditional model"),
    "seed": (int, 0, "root seed"),
    "dtype": (str, "float32", "parameter dtype: float32 or float64"),
    "d": (int, None, "embedding width (preset default if omitted)"),
    "enc_layers": (int, None, "encoder layers"),
    "dec_layers": (int, None, "decoder layers"),
    "heads": (int, None, "attention heads"),
    "n_residual": (int, None, "residual token count"),
    "n_noise": (int, None, "noise residual token count"),
    "v_bins": (int, None, "grid token vocabulary size"),
    "club_hidden": (int, None, "hidden width of the conditional model"),
}

_ANALYZE_OPTS = {
    "checkpoint": (str, REQUIRED, "trained checkpoint"),
    "corpus": (str, REQUIRED, "corpus file holding the grid to analyze"),
    "index": (int, 0, "sample index within the corpus"),
    "out": (str, REQUIRED, "output JSON file of predicted attribute tokens"),
}

_SYNTH_OPTS = {
    "checkpoint": (str, REQUIRED, "trained checkpoint"),
    "attrs": (str, REQUIRED, "JSON file of attribute token sequences"),
    "residual_from": (str, None, "corpus file supplying the residual source sample"),
    "residual_index": (int, 0, "sample index within the residual source corpus"),
    "with_noise_residual": (int, 0, "1 = also inject the source's noise tokens"),
    "out": (str, REQUIRED, "output .npy grid file"),
}

_ABLATE_OPTS = {
    "checkpoint": (str, REQUIRED, "trained checkpoint"),
    "corpus": (str, REQUIRED, "corpus file (held-out split is evaluated)"),
    "modes": (str, ",".join(m.value for m in ABLATION_MODES),
              "comma-separated ablation mode names"),
    "max_samples": (int, 0, "cap on evaluated samples (0 = all held out)"),
    "workers": (int, 1, "parallel workers for per-sample evaluation"),
    "out": (str, REQUIRED, "output CSV path (JSON record written beside it)"),
}

_SWEEP_OPTS = dict(_TRAIN_OPTS)
_SWEEP_OPTS.pop("out")
_SWEEP_OPTS.update({
    "taus": (str, "0,0.5,1", "comma-separated dropout thresholds to train"),
    "out": (str, REQUIRED, "output prefix: writes <out>.csv/.json and per-tau "
                           "checkpoints <out>_tau<t>.ckpt"),
})

_DENOISE_OPTS = {
    "checkpoint": (str, REQUIRED, "checkpoint trained with noise tokens"),
    "corpus": (str, REQUIRED, "part-noisy corpus (held-out noisy samples used)"),
    "max_samples": (int, 0, "cap on evaluated samples (0 = all)"),
    "out": (str, REQUIRED, "output CSV path (JSON record written beside it)"),
}

_COMMANDS = {
    "gen-data": (_GEN_OPTS, "generate a synthetic corpus file"),
    "train": (_TRAIN_OPTS, "train a model on a corpus"),
    "analyze": (_ANALYZE_OPTS, "predict attribute tokens from a grid"),
    "synthesize": (_SYNTH_OPTS, "generate a grid from attribute tokens"),
    "ablate": (_ABLATE_OPTS, "evaluate the ablation mode grid"),
    "sweep-tau": (_SWEEP_OPTS, "train and evaluate one model per threshold"),
    "denoise": (_DENOISE_OPTS, "evaluate noise-token deactivation"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resmae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (opts, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None,
                       help="flat key=value config file; flags override it")
        for key, (typ, default, help_s) in opts.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, type=typ, default=None, help=help_s)
    return parser


def _resolve(args, opts, preset_values=None):
    """flags > config file > preset > built-in default; rejects unknown keys."""
    file_values = {}
    if args.config:
        raw = parse_kv_file(args.config)
        unknown = set(raw) - set(opts)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key, text in raw.items():
            typ = opts[key][0]
            file_values[key] = typ(text)
    out = {}
    for key, (typ, default, _help) in opts.items():
        value = getattr(args, key)
        if value is None:
            value = file_values.get(key)
        if value is None and preset_values:
            value = preset_values.get(key)
        if value is None:
            value = None if default is REQUIRED else default
        if value is None and default is REQUIRED:
            raise ValueError(f"missing required option --{key.replace('_', '-')}")
        out[key] = value
    return out


DESK_EPOCHS = 12
PAPER_EPOCHS = 400


def _cmd_gen_data(v) -> None:
    ranges = FactorRanges(pitch_bins=v["pitch_bins"], loudness_bins=v["loudness_bins"],
                          speakers=v["speakers"], content=v["content"])
    corpus = generate_corpus(v["n"], v["seed"], v["noise_fraction"],
                             t_frames=v["t_frames"], f_bins=v["f_bins"],
                             ranges=ranges, workers=v["workers"])
    save_corpus(corpus, v["out"], seed=v["seed"], noise_fraction=v["noise_fraction"])


def _train_config(v) -> TrainConfig:
    corpus = load_corpus(v["corpus"])
    base = desk_config() if v["preset"] == "desk" else paper_config()
    if v["preset"] not in ("desk", "paper"):
        raise ValueError(f"unknown preset {v['preset']!r}")
    model = dataclasses.replace(
        base,
        t_frames=corpus.t_frames, f_bins=corpus.f_bins, ranges=corpus.ranges,
        **{k: v[k] for k in ("d", "enc_layers", "dec_layers", "heads", "n_residual",
                             "n_noise", "v_bins", "club_hidden") if v[k] is not None},
        dtype=v["dtype"])
    epochs = v["epochs"]
    if epochs is None:
        epochs = DESK_EPOCHS if v["preset"] == "desk" else PAPER_EPOCHS
    metrics = v["metrics"] or (v.get("out", "model.ckpt") + ".metrics.jsonl")
    return TrainConfig(corpus_path=v["corpus"], checkpoint_path=v.get("out"),
                       metrics_path=metrics, epochs=epochs, batch_size=v["batch_size"],
                       lr=v["lr"], weight_decay=v["weight_decay"],
                       mel_mask_ratio=v["mel_mask_ratio"], attr_mask_ratio=v["attr_mask_ratio"],
                       tau=v["tau"], lam_mi=v["lam_mi"], q_lr=v["q_lr"], seed=v["seed"],
                       model=model)


def _cmd_train(v) -> None:
    train(_train_config(v))


def _write_attr_json(attrs: AttributeTokens, path: str) -> None:
    record = {name: [int(t) for t in attrs.stream(name)] for name in ATTR_STREAMS}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _read_attr_json(path: str, ckpt: Checkpoint) -> AttributeTokens:
    with open(path, "r", encoding="utf-8") as fh:
        record = json.load(fh)
    missing = [name for name in ATTR_STREAMS if name not in record]
    if missing:
        raise ValueError(f"attribute file missing streams: {', '.join(missing)}")
    t = ckpt.model.t_frames
    arrays = {}
    for name in ATTR_STREAMS:
        arr = np.asarray(record[name], dtype=np.int64)
        if arr.shape != (t,):
            raise ValueError(f"{name} must have length {t}, got {arr.shape}")
        arrays[name] = arr
    return AttributeTokens(pitch=arrays["pitch"], loudness=arrays["loudness"],
                           speaker=arrays["speaker"], content=arrays["content"],
                           ranges=ckpt.model.ranges)


def _cmd_analyze(v) -> None:
    ckpt = load_checkpoint(v["checkpoint"])
    corpus = load_corpus(v["corpus"])
    if not 0 <= v["index"] < len(corpus):
        raise ValueError(f"index {v['index']} outside corpus of {len(corpus)} samples")
    attrs = analyze_attributes(ckpt.params, ckpt.model, ckpt.quantizer,
                               corpus.samples[v["index"]].grid)
    _write_attr_json(attrs, v["out"])


def _cmd_synthesize(v) -> None:
    ckpt = load_checkpoint(v["checkpoint"])
    attrs = _read_attr_json(v["attrs"], ckpt)
    residual = noise_residual = None
    if v["residual_from"]:
        source = load_corpus(v["residual_from"])
        if not 0 <= v["residual_index"] < len(source):
            raise ValueError(f"residual_index {v['residual_index']} outside corpus")
        sample = source.samples[v["residual_index"]]
        tokens = quantize_mel(sample.grid, ckpt.quantizer)
        grid_emb = embed_full_grid(ckpt.params, ckpt.model, tokens)
        want_noise = bool(v["with_noise_residual"]) and ckpt.model.n_noise > 0
        residual, noise_residual, _ = extract_pair(ckpt.params, ckpt.model, grid_emb,
                                                   want_noise)
    grid = generate_mel(ckpt.params, ckpt.model, ckpt.quantizer, attrs,
                        residual=residual, noise_residual=noise_residual)
    np.save(v["out"], grid)


def _cmd_ablate(v) -> None:
    ckpt = load_checkpoint(v["checkpoint"])
    corpus = load_corpus(v["corpus"])
    modes = [Mode(m.strip()) for m in v["modes"].split(",") if m.strip()]
    rows = ablation_table(ckpt, corpus, max_samples=v["max_samples"] or None,
                          modes=modes, workers=v["workers"])
    write_ablation(rows, v["out"])


def _cmd_sweep_tau(v) -> None:
    taus = [float(t) for t in v["taus"].split(",") if t.strip()]
    if not taus:
        raise ValueError("no tau values given")
    base = _train_config({**v, "out": v["out"] + ".ckpt",
                          "metrics": v["metrics"] or v["out"] + ".metrics.jsonl"})
    tau_sweep(taus, base, out_prefix=v["out"])


def _cmd_denoise(v) -> None:
    ckpt = load_checkpoint(v["checkpoint"])
    corpus = load_corpus(v["corpus"])
    record = denoise_eval(ckpt, corpus, max_samples=v["max_samples"] or None)
    write_denoise(record, v["out"])


_RUNNERS = {
    "gen-data": (_GEN_OPTS, _cmd_gen_data),
    "train": (_TRAIN_OPTS, _cmd_train),
    "analyze": (_ANALYZE_OPTS, _cmd_analyze),
    "synthesize": (_SYNTH_OPTS, _cmd_synthesize),
    "ablate": (_ABLATE_OPTS, _cmd_ablate),
    "sweep-tau": (_SWEEP_OPTS, _cmd_sweep_tau),
    "denoise": (_DENOISE_OPTS, _cmd_denoise),
}


def dispatch(argv) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    opts, runner = _RUNNERS[args.command]
    try:
        values = _resolve(args, opts)
        runner(values)
    except (OSError, ValueError, KeyError, CheckpointError, CorpusFormatError,
            TrainingDivergedError) as exc:
        print(f"resmae {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
