# Copyright 2024 Tarkan Al-Kazily

from .errors import (
    PutriError,
    ConfigError,
    InfeasibleTargetError,
    ModelFormatError,
    SingularSystemError,
)
from .linalg import matmul, column_sq_norms, solve_normal_equations
from .model import (
    ModelConfig,
    LayerWeights,
    ToyTransformer,
    HeadMask,
    init_random,
    forward,
    forward_with_tap,
    apply_head_mask,
    remove_kv_head,
    remove_ffn_nodes,
)
from .train import train_toy
from .serialization import save, load, digest
from .data import CalibrationSet, tokenize_bytes, load_corpus
from .evaluation import PerplexityResult, perplexity, achieved_sparsity
from .pruning import (
    PruneConfig,
    SparsityAllocation,
    PruneReport,
    count_prunable_params,
    allocate,
    score_ffn_nodes,
    select_keep,
    prune_ffn_sequential,
    prune_attention_heads,
    putri,
)
from .presets import PRESETS, get_preset_names
