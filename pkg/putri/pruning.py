# Copyright 2024 Tarkan Al-Kazily
"""
Structured pruning pipeline.

FFN layers are pruned first, front to back: intermediate nodes are ranked by the squared L2
norm of their calibration activations, the weakest are removed and the surviving down
projection rows are refit by least squares so the layer output changes as little as
possible. Grouped key-value heads are then removed iteratively, each round dropping the heads
whose removal hurts calibration perplexity the least.
"""

import concurrent.futures
import dataclasses
import logging
import math
import time
import typing

import torch

from putri.data import PAD, CalibrationSet
from putri.errors import ConfigError, InfeasibleTargetError, PerplexityError, PutriError
from putri.evaluation import PerplexityResult, perplexity, sparsity_from_counts
from putri.linalg import (
    ACCUM_DTYPE,
    column_sq_norms,
    solve_normal_equations_info,
    squared_residual,
)
from putri.model import (
    HeadMask,
    ToyTransformer,
    remove_ffn_nodes,
    remove_kv_head,
    replace_down,
    run,
)

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class PruneConfig:
    """
    Attributes:
        target_sparsity: Fraction s of FFN + attention parameters to remove, 0 <= s < 1
        alpha: Attention vs FFN split exponent scale
        p_min: Minimum FFN nodes kept per layer (0 permits deleting the FFN block)
        heads_per_iteration: Grouped heads removed per scoring round, None = n_kv_heads
        score_sequences: Calibration sequences used to score each head candidate
        ridge: Initial regularizer of the least squares refit
        no_ffn_update: Slice the down projection without refitting it
        parallel_update: Collect all FFN taps from the unpruned model in one pass
        full_attention: Remove whole attention sub-blocks instead of single grouped heads
        workers: Threads used to score head candidates
    """

    target_sparsity: float
    alpha: float = 1.5
    p_min: int = 1
    heads_per_iteration: int | None = None
    score_sequences: int = 1
    ridge: float = 0.0
    no_ffn_update: bool = False
    parallel_update: bool = False
    full_attention: bool = False
    workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError(f"target_sparsity must be in [0, 1), got {self.target_sparsity}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.p_min < 0:
            raise ConfigError(f"p_min must be >= 0, got {self.p_min}")
        if self.heads_per_iteration is not None and self.heads_per_iteration < 1:
            raise ConfigError(
                f"heads_per_iteration must be >= 1, got {self.heads_per_iteration}"
            )
        if self.score_sequences < 1:
            raise ConfigError(f"score_sequences must be >= 1, got {self.score_sequences}")
        if self.ridge < 0:
            raise ConfigError(f"ridge must be >= 0, got {self.ridge}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class SparsityAllocation:
    """
    Resolved pruning budget.

    Attributes:
        n_kv_heads_to_remove: Grouped heads removed model-wide
        n_attn_layers_equiv: Attention-layer equivalent count the head budget derives from
        ffn_sparsity: Fraction of FFN parameters that must go, clamped to [0, 1]
        keep_per_layer: FFN nodes kept in every layer (P)
        predicted_achieved_sparsity: Sparsity implied by the integer head and node counts
        ffn_params: |theta_FFN| of the unpruned model
        attn_params: |theta_Attn| of the unpruned model
    """

    n_kv_heads_to_remove: int
    n_attn_layers_equiv: int
    ffn_sparsity: float
    keep_per_layer: int
    predicted_achieved_sparsity: float
    ffn_params: int
    attn_params: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class LayerReconstruction:
    """
    FFN pruning record of one layer.

    Attributes:
        layer: Layer index
        kept: Original indices of the kept nodes
        residual_before: ||Z W - Z_P W[keep]||^2 on calibration, before the refit
        residual_after: Same residual with the refit weights (equal when not refitting)
        ridge: Ridge of the successful solve
        escalations: Ridge escalations needed
    """

    layer: int
    kept: tuple[int, ...]
    residual_before: float
    residual_after: float
    ridge: float = 0.0
    escalations: int = 0


@dataclasses.dataclass
class PruneReport:
    """
    Machine-readable record of one pruning run.

    Attributes:
        status: "ok" or "failed"
        error: Failure message
        config: Prune configuration
        model_config: Config of the pruned model
        allocation: Budget, None when allocation failed
        removed_kv_heads: Per layer, original indices of removed KV heads in removal order
        kept_ffn_nodes: Per layer, original indices of the kept FFN nodes
        reconstruction: Per-layer FFN refit records
        ridge_escalations: Total ridge escalations over all layers
        perplexity: Eval set name -> {"before": result, "after": result}, None = unavailable
        params_before: (F, A) before pruning
        params_after: (F, A) after pruning
        achieved_sparsity: 1 - params_after / params_before over FFN + attention
        wall_clock_seconds: Pipeline duration
        provenance: Seeds, corpus digests and other run inputs
    """

    status: str
    config: PruneConfig
    model_config: dict
    error: str | None = None
    allocation: SparsityAllocation | None = None
    removed_kv_heads: list[list[int]] = dataclasses.field(default_factory=list)
    kept_ffn_nodes: list[list[int]] = dataclasses.field(default_factory=list)
    reconstruction: list[LayerReconstruction] = dataclasses.field(default_factory=list)
    ridge_escalations: int = 0
    perplexity: dict[str, dict[str, PerplexityResult | None]] = dataclasses.field(
        default_factory=dict
    )
    params_before: tuple[int, int] | None = None
    params_after: tuple[int, int] | None = None
    achieved_sparsity: float | None = None
    wall_clock_seconds: float = 0.0
    provenance: dict = dataclasses.field(default_factory=dict)


def round_half_away(x: float) -> int:
    """Round to the nearest integer, halves away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def count_prunable_params(model: ToyTransformer) -> tuple[int, int]:
    """
    Returns:
        (F, A): parameters of gate/up/down (or fc1/fc2) and of wq/wk/wv/wo over all layers
    """
    return model.prunable_params()


def max_achievable_sparsity(model: ToyTransformer, p_min: int) -> float:
    """Sparsity with every grouped head removed and p_min FFN nodes left per layer."""
    config = model.config
    ffn, attn = count_prunable_params(model)
    removable_ffn = config.n_layers * (config.d_ff - p_min) * config.node_params
    return (attn + removable_ffn) / (ffn + attn)


def allocate(config: PruneConfig, model: ToyTransformer) -> SparsityAllocation:
    """
    Split the target sparsity between grouped heads and FFN nodes.

        N_Attn     = round(L * s ^ (F / (alpha * A)))
        N_KV-Heads = K * N_Attn, clamped to [0, K * L]
        s_ffn      = (s * (F + A) - N_KV-Heads * head_params) / F, clamped to [0, 1]
        P          = clamp(round((1 - s_ffn) * d_ff), p_min, d_ff)

    Raises:
        ConfigError: Model already pruned, or p_min > d_ff.
        InfeasibleTargetError: s exceeds the sparsity reachable at P = p_min with every head
            removed.
    """
    mc = model.config
    if not model.is_unpruned():
        raise ConfigError("allocate needs an unpruned model")
    if config.p_min > mc.d_ff:
        raise ConfigError(f"p_min {config.p_min} exceeds d_ff {mc.d_ff}")

    ffn, attn = count_prunable_params(model)
    total = ffn + attn
    s = config.target_sparsity
    max_sparsity = max_achievable_sparsity(model, config.p_min)
    if s > max_sparsity:
        raise InfeasibleTargetError(
            f"Target sparsity {s} is unreachable, max achievable is {max_sparsity:.6f}",
            max_sparsity=max_sparsity,
        )

    n_layers = mc.n_layers
    exponent = ffn / (config.alpha * attn)
    n_attn = round_half_away(n_layers * s**exponent)
    n_heads = min(max(mc.n_kv_heads * n_attn, 0), mc.n_kv_heads * n_layers)
    removed_attn = n_heads * mc.head_params

    ffn_sparsity = min(max((s * total - removed_attn) / ffn, 0.0), 1.0)
    keep = round_half_away((1.0 - ffn_sparsity) * mc.d_ff)
    keep = min(max(keep, config.p_min), mc.d_ff)
    removed_ffn = n_layers * (mc.d_ff - keep) * mc.node_params
    predicted = (removed_attn + removed_ffn) / total

    allocation = SparsityAllocation(
        n_kv_heads_to_remove=n_heads,
        n_attn_layers_equiv=n_attn,
        ffn_sparsity=ffn_sparsity,
        keep_per_layer=keep,
        predicted_achieved_sparsity=predicted,
        ffn_params=ffn,
        attn_params=attn,
    )
    logger.info(
        "Allocation for s=%g alpha=%g: N_Attn=%d, %d KV heads, s_ffn=%.4f, P=%d, predicted %.4f",
        s,
        config.alpha,
        n_attn,
        n_heads,
        ffn_sparsity,
        keep,
        predicted,
    )
    return allocation


def score_ffn_nodes(z: torch.Tensor) -> torch.Tensor:
    """
    Returns:
        Squared L2 norm of every column of the stacked activations z
    """
    return column_sq_norms(z)


def select_keep(scores: torch.Tensor, keep: int) -> list[int]:
    """
    Positions of the keep largest scores, ascending. Equal scores favor the lower position.
    """
    scores = torch.as_tensor(scores, dtype=ACCUM_DTYPE)
    if not 0 <= keep <= scores.numel():
        raise ConfigError(f"Cannot keep {keep} of {scores.numel()} nodes")
    order = torch.sort(scores, descending=True, stable=True).indices
    return sorted(int(i) for i in order[:keep])


def collect_taps(
    model: ToyTransformer, calib: CalibrationSet, layers: typing.Iterable[int]
) -> dict[int, torch.Tensor]:
    """
    Run the calibration set through the model and stack FFN intermediate activations.

    Returns:
        layer -> (non-PAD positions) x ff_live float64 matrix
    """
    layers = list(layers)
    chunks = {layer: [] for layer in layers}
    for seq in calib.sequences:
        tokens = torch.as_tensor(seq, dtype=torch.long)
        valid = tokens != PAD
        with torch.no_grad():
            result = run(model, tokens, taps=layers)
        for layer in layers:
            chunks[layer].append(result.taps[layer][valid])
    taps = {layer: torch.cat(chunks[layer], dim=0) for layer in layers}
    for layer, z in taps.items():
        if z.shape[0] == 0:
            raise PutriError(f"Calibration set has no non-PAD positions for layer {layer}")
    return taps


def prune_ffn_layer(
    model: ToyTransformer,
    layer: int,
    z: torch.Tensor,
    keep: int,
    config: PruneConfig,
) -> tuple[ToyTransformer, LayerReconstruction]:
    """
    Prune one FFN layer given its calibration activations z and refit its down projection.

    The refit target is z @ down with the layer's current down weights.
    """
    weights = model.layers[layer]
    down = weights.down.to(ACCUM_DTYPE)
    target = z @ down
    positions = select_keep(score_ffn_nodes(z), keep)
    kept = tuple(weights.ff_nodes[p] for p in positions)
    model = remove_ffn_nodes(model, layer, kept, allow_empty=True)

    index = torch.tensor(positions, dtype=torch.long)
    zp = z[:, index]
    before = squared_residual(zp, down[index, :], target)
    if config.no_ffn_update or not positions:
        record = LayerReconstruction(layer, kept, before, before, 0.0, 0)
    else:
        solution = solve_normal_equations_info(zp, target, config.ridge)
        model = replace_down(model, layer, solution.weights)
        after = squared_residual(zp, solution.weights, target)
        record = LayerReconstruction(
            layer, kept, before, after, solution.ridge, solution.escalations
        )
    logger.info(
        "FFN layer %d: kept %d/%d nodes, residual %.6g -> %.6g",
        layer,
        len(kept),
        weights.ff_live,
        record.residual_before,
        record.residual_after,
    )
    return model, record


def prune_ffn_sequential(
    model: ToyTransformer,
    calib: CalibrationSet,
    allocation: SparsityAllocation,
    config: PruneConfig,
) -> tuple[ToyTransformer, list[LayerReconstruction]]:
    """
    Prune every FFN layer to allocation.keep_per_layer nodes, front to back.

    Each layer's activations are collected from the current model, so upstream pruning and
    refits are seen downstream. With parallel_update all activations come from one pass over
    the input model instead.

    Returns:
        (pruned model, per-layer reconstruction records)
    """
    n_layers = model.config.n_layers
    keep = allocation.keep_per_layer
    records = []
    parallel_taps = collect_taps(model, calib, range(n_layers)) if config.parallel_update else None
    for layer in range(n_layers):
        if parallel_taps is not None:
            z = parallel_taps[layer]
        else:
            z = collect_taps(model, calib, [layer])[layer]
        model, record = prune_ffn_layer(model, layer, z, keep, config)
        records.append(record)
    return model, records


def _sort_key(result: PerplexityResult) -> float:
    return result.value if not math.isnan(result.value) else math.inf


def score_masks(
    model: ToyTransformer,
    sequences: typing.Sequence[typing.Sequence[int]],
    masks: typing.Sequence[HeadMask],
    workers: int = 1,
) -> list[PerplexityResult]:
    """
    Perplexity of the model under each mask, in mask order. Candidates only read the model,
    so they may be scored on a thread pool.
    """

    def score(mask: HeadMask) -> PerplexityResult:
        return perplexity(model, sequences, head_mask=mask)

    if workers <= 1:
        return [score(mask) for mask in masks]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(score, masks))


def _remove_heads_iteratively(
    model: ToyTransformer,
    sequences: list[tuple[int, ...]],
    budget: int,
    per_iteration: int,
    workers: int,
    removed: list[list[int]],
) -> ToyTransformer:
    base = HeadMask.all_active(model.config)
    remaining = budget
    iteration = 0
    while remaining > 0:
        candidates = [
            (layer, head)
            for layer, weights in enumerate(model.layers)
            for head in weights.kv_heads
        ]
        masks = [base.without_head(layer, head) for layer, head in candidates]
        results = score_masks(model, sequences, masks, workers)
        order = sorted(
            range(len(candidates)), key=lambda i: (_sort_key(results[i]), candidates[i])
        )
        chosen = [candidates[i] for i in order[: min(per_iteration, remaining)]]
        for layer, head in chosen:
            model = remove_kv_head(model, layer, head)
            removed[layer].append(head)
        remaining -= len(chosen)
        iteration += 1
        logger.info(
            "Head iteration %d: removed %s (ppl %s), %d left",
            iteration,
            chosen,
            [str(results[i]) for i in order[: len(chosen)]],
            remaining,
        )
    return model


def _remove_attention_layers(
    model: ToyTransformer,
    sequences: list[tuple[int, ...]],
    n_layers: int,
    workers: int,
    removed: list[list[int]],
) -> ToyTransformer:
    base = HeadMask.all_active(model.config)
    for _ in range(n_layers):
        candidates = [i for i, weights in enumerate(model.layers) if weights.kv_live > 0]
        masks = [base.without_layer(layer) for layer in candidates]
        results = score_masks(model, sequences, masks, workers)
        best = min(range(len(candidates)), key=lambda i: (_sort_key(results[i]), candidates[i]))
        layer = candidates[best]
        for head in model.layers[layer].kv_heads:
            model = remove_kv_head(model, layer, head)
            removed[layer].append(head)
        logger.info("Removed attention block of layer %d (ppl %s)", layer, results[best])
    return model


def prune_attention_heads(
    model: ToyTransformer,
    calib: CalibrationSet,
    allocation: SparsityAllocation,
    config: PruneConfig,
) -> tuple[ToyTransformer, list[list[int]]]:
    """
    Remove allocation.n_kv_heads_to_remove grouped heads.

    Every round scores each live grouped head by the perplexity of the model with that head
    masked off, on the first score_sequences calibration sequences, then removes the
    heads_per_iteration lowest (ties by layer, then head index). With full_attention whole
    attention sub-blocks are removed one at a time by the same criterion.

    Returns:
        (pruned model, per-layer removed original KV indices)

    Raises:
        InfeasibleTargetError: Budget exceeds the live heads.
    """
    removed = [[] for _ in model.layers]
    budget = allocation.n_kv_heads_to_remove
    if budget == 0:
        return model, removed
    live = sum(weights.kv_live for weights in model.layers)
    if budget > live:
        raise InfeasibleTargetError(
            f"Cannot remove {budget} KV heads, only {live} are live", max_sparsity=float("nan")
        )
    sequences = list(calib.head(config.score_sequences).sequences)

    if config.full_attention:
        model = _remove_attention_layers(
            model, sequences, allocation.n_attn_layers_equiv, config.workers, removed
        )
    else:
        per_iteration = config.heads_per_iteration or model.config.n_kv_heads
        model = _remove_heads_iteratively(
            model, sequences, budget, per_iteration, config.workers, removed
        )
    return model, removed


def _safe_perplexity(model: ToyTransformer, calib: CalibrationSet) -> PerplexityResult | None:
    try:
        return perplexity(model, calib.sequences)
    except PerplexityError as e:
        logger.warning("Perplexity unavailable: %s", e)
        return None


def putri(
    model: ToyTransformer,
    calib: CalibrationSet,
    eval_set: CalibrationSet | typing.Mapping[str, CalibrationSet],
    config: PruneConfig,
    provenance: dict | None = None,
) -> tuple[ToyTransformer, PruneReport]:
    """
    Full pipeline: allocate, prune FFN layers sequentially, prune grouped heads iteratively,
    then measure perplexity before and after.

    Args:
        model: Unpruned model, left untouched
        calib: Calibration set for scoring and reconstruction
        eval_set: Held-out set, or a mapping name -> set for several corpora
        config: Prune configuration
        provenance: Extra inputs recorded verbatim in the report (seeds, paths)

    Raises:
        ConfigError, InfeasibleTargetError, and solver/shape errors from the stages.
    """
    started = time.perf_counter()
    if isinstance(eval_set, CalibrationSet):
        eval_sets = {"eval": eval_set}
    else:
        eval_sets = dict(eval_set)
    vocab = model.config.vocab_size
    calib.check_vocab(vocab)
    for data in eval_sets.values():
        data.check_vocab(vocab)

    allocation = allocate(config, model)
    params_before = count_prunable_params(model)
    ppl_before = {name: _safe_perplexity(model, data) for name, data in eval_sets.items()}

    pruned = model
    records = []
    if allocation.keep_per_layer < model.config.d_ff:
        pruned, records = prune_ffn_sequential(pruned, calib, allocation, config)
    pruned, removed = prune_attention_heads(pruned, calib, allocation, config)

    ppl_after = {name: _safe_perplexity(pruned, data) for name, data in eval_sets.items()}
    params_after = count_prunable_params(pruned)
    report = PruneReport(
        status="ok",
        config=config,
        model_config=model.config.to_dict(),
        allocation=allocation,
        removed_kv_heads=removed,
        kept_ffn_nodes=[list(weights.ff_nodes) for weights in pruned.layers],
        reconstruction=records,
        ridge_escalations=sum(r.escalations for r in records),
        perplexity={
            name: {"before": ppl_before[name], "after": ppl_after[name]} for name in eval_sets
        },
        params_before=params_before,
        params_after=params_after,
        achieved_sparsity=sparsity_from_counts(params_before, params_after),
        wall_clock_seconds=time.perf_counter() - started,
        provenance={
            **(provenance or {}),
            "calib_digest": calib.digest(),
            "calib_source_digest": calib.source_digest,
            "eval_digests": {name: data.digest() for name, data in eval_sets.items()},
        },
    )
    logger.info(
        "Pruned to sparsity %.4f (target %g) in %.2fs",
        report.achieved_sparsity,
        config.target_sparsity,
        report.wall_clock_seconds,
    )
    return pruned, report


def failed_report(
    model: ToyTransformer, config: PruneConfig, error: Exception, provenance: dict | None = None
) -> PruneReport:
    """Report for a run that could not complete."""
    return PruneReport(
        status="failed",
        config=config,
        model_config=model.config.to_dict(),
        error=str(error),
        params_before=count_prunable_params(model),
        provenance=dict(provenance or {}),
    )


ABLATION_FLAGS = ("no_ffn_update", "parallel_update", "full_attention")

# Variant name -> the one ablation flag it switches on
ABLATION_VARIANTS = {
    "putri": None,
    "no_ffn_update": "no_ffn_update",
    "parallel_update": "parallel_update",
    "full_attention": "full_attention",
}


def variant_flags(variant: str) -> dict[str, bool]:
    """
    Returns:
        Every ablation flag, True only for the one the variant switches on
    """
    if variant not in ABLATION_VARIANTS:
        raise ConfigError(f"Unknown ablation variant {variant!r}")
    return {flag: flag == ABLATION_VARIANTS[variant] for flag in ABLATION_FLAGS}


@dataclasses.dataclass(frozen=True)
class AblationRow:
    """
    One cell of an ablation sweep. achieved and ppl are None for failed runs.
    """

    variant: str
    sparsity: float
    seed: int
    achieved: float | None
    ppl: PerplexityResult | None
    error: str | None = None


def ablation_sweep(
    model: ToyTransformer,
    calib_sets: typing.Mapping[int, CalibrationSet],
    eval_set: CalibrationSet,
    sparsities: typing.Sequence[float],
    base: PruneConfig,
    variants: typing.Sequence[str] = tuple(ABLATION_VARIANTS),
    workers: int = 1,
) -> list[AblationRow]:
    """
    Run each variant at each sparsity for each calibration seed.

    Args:
        model: Unpruned model
        calib_sets: seed -> calibration set drawn with that seed
        eval_set: Held-out set shared by every run
        sparsities: Target sparsities
        base: Settings shared by all runs (target_sparsity and ablation flags are overridden)
        variants: Names from ABLATION_VARIANTS
        workers: Rows run concurrently

    Returns:
        Rows ordered by (variant, sparsity, seed) as given, whatever the completion order.
    """
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigError(f"Unknown ablation variants {unknown}")
    jobs = [
        (variant, sparsity, seed)
        for variant in variants
        for sparsity in sparsities
        for seed in calib_sets
    ]

    def run_job(job) -> AblationRow:
        variant, sparsity, seed = job
        try:
            config = dataclasses.replace(
                base, target_sparsity=sparsity, **variant_flags(variant)
            )
            _, report = putri(model, calib_sets[seed], eval_set, config, {"seed": seed})
        except PutriError as e:
            logger.warning("Ablation %s s=%g seed=%d failed: %s", variant, sparsity, seed, e)
            return AblationRow(variant, sparsity, seed, None, None, str(e))
        return AblationRow(
            variant,
            sparsity,
            seed,
            report.achieved_sparsity,
            report.perplexity["eval"]["after"],
        )

    if workers <= 1:
        return [run_job(job) for job in jobs]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_job, jobs))
