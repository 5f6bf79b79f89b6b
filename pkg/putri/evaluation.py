# Copyright 2024 Tarkan Al-Kazily

import dataclasses
import logging
import math
import typing

import torch

from putri.data import PAD
from putri.errors import ConfigError, PerplexityError
from putri.linalg import ACCUM_DTYPE
from putri.model import HeadMask, ToyTransformer, run

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class PerplexityResult:
    """
    Corpus-level perplexity.

    Attributes:
        value: exp(nll_sum / token_count), or math.inf when logits overflowed or were NaN
        token_count: Number of scored targets
        nll_sum: Summed negative log-likelihood in float64
    """

    value: float
    token_count: int
    nll_sum: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.value)

    def __str__(self) -> str:
        return f"{self.value:#.6g}" if self.finite else "inf"


def sequence_nll(
    model: ToyTransformer,
    sequence: typing.Sequence[int],
    head_mask: HeadMask | None = None,
) -> tuple[float, int]:
    """
    Returns:
        (summed NLL of the non-PAD targets 1..T-1, number of those targets). The NLL is
        math.inf when the logits are not all finite.
    """
    tokens = torch.as_tensor(list(sequence), dtype=torch.long)
    if tokens.numel() < 2:
        raise PerplexityError(f"Sequence of {tokens.numel()} tokens has no next-token target")
    targets = tokens[1:]
    scored = targets != PAD
    count = int(scored.sum())
    if count == 0:
        return 0.0, 0

    with torch.no_grad():
        logits = run(model, tokens[:-1], head_mask=head_mask).logits.to(ACCUM_DTYPE)
    if not bool(torch.isfinite(logits).all()):
        return math.inf, count
    log_probs = torch.log_softmax(logits, dim=-1)
    picked = log_probs[torch.arange(targets.numel()), targets]
    nll = float(-picked[scored].sum())
    if math.isnan(nll):
        return math.inf, count
    return nll, count


def perplexity(
    model: ToyTransformer,
    sequences: typing.Iterable[typing.Sequence[int]],
    head_mask: HeadMask | None = None,
) -> PerplexityResult:
    """
    Token-weighted perplexity over all sequences: per-sequence NLLs are summed in order and
    exponentiated once. PAD targets are skipped.

    Args:
        model: Model to evaluate
        sequences: Token sequences of length >= 2
        head_mask: Optional grouped-head mask

    Raises:
        PerplexityError: No sequences, or every target is PAD.
    """
    sequences = list(sequences)
    if not sequences:
        raise PerplexityError("Cannot compute perplexity of an empty sequence set")

    nll_sum = 0.0
    token_count = 0
    for seq in sequences:
        nll, count = sequence_nll(model, seq, head_mask)
        nll_sum += nll
        token_count += count
    if token_count == 0:
        raise PerplexityError("Every target token is PAD")

    if not math.isfinite(nll_sum):
        logger.debug("Non-finite NLL over %d targets, perplexity is inf", token_count)
        return PerplexityResult(math.inf, token_count, nll_sum)
    try:
        value = math.exp(nll_sum / token_count)
    except OverflowError:
        value = math.inf
    return PerplexityResult(value, token_count, nll_sum)


def sparsity_from_counts(before: tuple[int, int], after: tuple[int, int]) -> float:
    """
    Returns:
        1 - (F_after + A_after) / (F_before + A_before), divided only at the end
    """
    total = before[0] + before[1]
    return (total - after[0] - after[1]) / total


def achieved_sparsity(before: ToyTransformer, after: ToyTransformer) -> float:
    """
    Fraction of prunable (FFN + attention) parameters removed.
    """
    if before.config != after.config:
        raise ConfigError("achieved_sparsity needs two models of the same config")
    return sparsity_from_counts(before.prunable_params(), after.prunable_params())
