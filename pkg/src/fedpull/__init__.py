"""Cross-silo federated learning simulator with dynamic tensor-selection compression."""

from .config import ConfigError, ExperimentConfig, default_domains, load_config
from .data import Corpus, DomainSpec, Vocab, default_vocab, generate_domain, load_parallel_files, split
from .federation import (
    ClientState,
    ClientUpdate,
    ExperimentReport,
    ServerState,
    chained_finetune,
    combined_finetune,
    evaluate_model,
    fedavg_aggregate,
    local_finetune,
    run_fl,
    run_round,
)
from .metrics import EvalResult, Histogram, corpus_bleu, norm_histogram, report_write, token_accuracy
from .model import (
    ModelConfig,
    ModelState,
    OptimizerState,
    backward,
    forward_loss,
    greedy_decode,
    greedy_decode_batch,
    init_model,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    train_steps,
)
from .selection import (
    BandwidthRecord,
    PullPolicy,
    SelectionResult,
    bandwidth,
    cluster_persistence,
    select_dp,
    select_threshold,
    tensor_deltas,
)
from .tensors import DeltaRecord, NamedTensor, diff, l1_norm, weighted_accumulate

__version__ = "0.1.0"
