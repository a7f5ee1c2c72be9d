"""Numpy building blocks with manual backprop, and the two toy training objectives."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import MarkovCorpus, ReversalTranslation, TokenBatch, accuracy, mask_batch
from .layers import (
    Dense,
    DecoderAdapter,
    Embedding,
    FeedForward,
    GeLU,
    LayerNorm,
    Module,
    SingleHeadCrossAttention,
    softmax,
)
from .losses import (
    LossBreakdown,
    build_corrupt,
    clm_loss,
    combined_loss,
    decoder_forward,
    discriminator_loss,
    discriminator_objective,
    encoder_forward,
    generator_loss,
    translation_loss,
)
from .models import AdapterDecoder, AdapterEncoder, Discriminator, Generator, ModelConfig
from .optim import NonFiniteGradientError, OptimizerState, adam_step

__all__ = [name for name in dir() if not name.startswith("_")]
