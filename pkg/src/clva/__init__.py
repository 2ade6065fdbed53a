"""Language-guided image restyling with patch-wise adversarial training
and contrastive cross-pair reasoning."""

from .data import (
    ContentImage,
    ContrastiveBatch,
    CorpusError,
    LvaBatch,
    SplitManifest,
    StyleRecord,
    crop_patches,
    load_content_corpus,
    load_style_corpus,
    make_split,
    sample_contrastive_batch,
    sample_lva_batch,
)
from .models import (
    CLVAModel,
    InstructionEmbedding,
    ModelConfig,
    VisualFeatures,
    init_model,
)
from .toy import generate_toy_corpus, procedural_stylize, write_toy_corpus
from .training import TrainConfig, cr_step, fit, lva_step, warmup_pretrain

__all__ = [
    "CLVAModel",
    "ContentImage",
    "ContrastiveBatch",
    "CorpusError",
    "InstructionEmbedding",
    "LvaBatch",
    "ModelConfig",
    "SplitManifest",
    "StyleRecord",
    "TrainConfig",
    "VisualFeatures",
    "cr_step",
    "crop_patches",
    "fit",
    "generate_toy_corpus",
    "init_model",
    "load_content_corpus",
    "load_style_corpus",
    "lva_step",
    "make_split",
    "procedural_stylize",
    "sample_contrastive_batch",
    "sample_lva_batch",
    "warmup_pretrain",
    "write_toy_corpus",
]

__version__ = "0.1.0"
