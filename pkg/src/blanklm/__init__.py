"""blanklm: a desk-scale blank-infilling language model.

Corrupt text by sampling spans, lay the spans out behind the corrupted
context with two positional tracks and a prefix/causal attention mask,
train a single transformer to reconstruct them, and reuse the same model
for cloze classification, text infilling, and language-model evaluation.
"""

from .errors import (
    BlankLMError,
    CheckpointError,
    ContractError,
    DegenerateInputError,
    LengthError,
    NumericError,
    ShapeError,
)
from .layout import (
    AttentionMaskSpec,
    Batch,
    GenerationContext,
    InfillExample,
    build_attention_mask,
    build_example,
    build_generation_context,
    collate,
    layout_teacher_forced,
)
from .model import Model, ModelConfig, Parameters, init_params, load_checkpoint, save_checkpoint
from .spans import (
    CorruptionConfig,
    Span,
    SpanSet,
    choose_objective,
    permute_spans,
    sample_document_span,
    sample_sentence_spans,
    sample_short_spans,
)
from .tensor import Tape, Tensor, backward, grad_check
from .train import TrainConfig, TrainState, lr_schedule, train_loop
from .vocab import Document, Vocab, build_vocab, load_corpus, split_sentences

__version__ = "0.1.0"
