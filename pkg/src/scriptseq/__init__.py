"""Two-stage generative script event prediction on synthetic MCNC data.

Pipeline: verbalize event chains to token sequences, pretrain a small
encoder-decoder LM with event-level blank infilling, fine-tune it with a
likelihood-based contrastive loss over candidate sets, and rank
candidates by the mean per-token log-probability of their verbalization.
"""

from .autodiff import Tensor, no_grad
from .corpus import (
    SchemaGrammar,
    SplitSpec,
    build_dataset,
    build_length_bias_dataset,
    builtin_grammar,
    generate_chain,
    load_grammar,
    sample_negatives,
)
from .errors import ScriptSeqError
from .estimator import ScriptEventPredictor
from .evaluation import EvalReport, TokenTrace, evaluate, run_ablations, token_trace
from .events import (
    Event,
    MCNCInstance,
    Script,
    make_event,
    read_instances,
    write_instances,
)
from .masking import (
    InfillSample,
    make_infill_sample,
    make_random_span_sample,
    reconstruct,
)
from .model import (
    ModelConfig,
    ModelParams,
    classifier_forward,
    forward_logprobs,
    gather_target_logprobs,
    grad,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .scoring import (
    ScoreVector,
    candidate_score,
    infill_nll,
    loss_cot,
    loss_cross,
    loss_margin,
    predict,
    score_instances,
    softmax_scores,
)
from .training import TrainConfig, TrainReport, accuracy, adam_step, finetune, pretrain
from .validation import check_instances
from .verbalizer import (
    MASK,
    Vocabulary,
    build_vocab,
    verbalize_event,
    verbalize_sequence,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "SchemaGrammar",
    "SplitSpec",
    "build_dataset",
    "build_length_bias_dataset",
    "builtin_grammar",
    "generate_chain",
    "load_grammar",
    "sample_negatives",
    "ScriptSeqError",
    "ScriptEventPredictor",
    "EvalReport",
    "TokenTrace",
    "evaluate",
    "run_ablations",
    "token_trace",
    "Event",
    "MCNCInstance",
    "Script",
    "make_event",
    "read_instances",
    "write_instances",
    "InfillSample",
    "make_infill_sample",
    "make_random_span_sample",
    "reconstruct",
    "ModelConfig",
    "ModelParams",
    "classifier_forward",
    "forward_logprobs",
    "gather_target_logprobs",
    "grad",
    "init_params",
    "load_checkpoint",
    "save_checkpoint",
    "ScoreVector",
    "candidate_score",
    "infill_nll",
    "loss_cot",
    "loss_cross",
    "loss_margin",
    "predict",
    "score_instances",
    "softmax_scores",
    "TrainConfig",
    "TrainReport",
    "accuracy",
    "adam_step",
    "finetune",
    "pretrain",
    "check_instances",
    "MASK",
    "Vocabulary",
    "build_vocab",
    "verbalize_event",
    "verbalize_sequence",
]
