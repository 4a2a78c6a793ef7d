"""Masked autoencoder over quantized grids with attribute streams,
cross-attention residual tokens, and a deactivatable noise token."""

from .backends import ACTIVE_BACKEND
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .club import club_estimate, fit_conditional_step, init_club_params, pool_tokens
from .masking import (DropoutGate, MaskConfig, MaskRatios, Mode, inference_mask,
                      residual_dropout_gate, sample_training_masks)
from .model import (CrossAttentionTrace, ModelConfig, ResidualTokenSet,
                    analyze_attributes, desk_config, embed_streams, forward,
                    generate, generate_mel, init_params, paper_config,
                    residual_extract)
from .quantizer import (AttributeTokens, MelQuantizer, dequantize_mel,
                        fit_mel_quantizer, quantize_attributes, quantize_mel)
from .synth import (Corpus, CorpusFormatError, FactorRanges, FactorSpec,
                    SyntheticSample, generate_corpus, generate_sample, load_corpus,
                    noise_energy_projection, noise_pattern, save_corpus)
from .train import TrainConfig, batch_loss_and_grads, compute_loss, train

__version__ = "0.1.0"
