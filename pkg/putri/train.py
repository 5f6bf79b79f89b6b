# Copyright 2024 Tarkan Al-Kazily

import dataclasses
import logging
import typing

import torch
import torch.nn.functional as F

from putri.errors import ConfigError, CorpusError
from putri.model import ToyTransformer, run
from putri.rng import XorShift64Star

logger = logging.getLogger(__name__)

_LAYER_TENSORS = ("wq", "wk", "wv", "wo", "gate", "up", "down", "attn_norm", "ffn_norm")


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """
    Attributes:
        steps: SGD steps, >= 0
        lr: Learning rate
        seed: Seed of the window sampler
        window: Tokens per training window (inputs + 1 target)
        batch_size: Windows averaged per step
        clip_norm: Global gradient norm clip, 0 disables
        log_every: Log the running loss every this many steps
    """

    steps: int = 500
    lr: float = 0.1
    seed: int = 0
    window: int = 64
    batch_size: int = 4
    clip_norm: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.window < 2 or self.batch_size < 1:
            raise ConfigError("window must be >= 2 and batch_size >= 1")


@dataclasses.dataclass(frozen=True)
class TrainResult:
    """
    Attributes:
        model: Trained model
        initial_loss: Loss of the first batch before any update
        final_loss: Loss of that same batch after the last update
        losses: Per-step batch losses, measured before each update
    """

    model: ToyTransformer
    initial_loss: float
    final_loss: float
    losses: list[float]


def _map_tensors(model: ToyTransformer, fn) -> ToyTransformer:
    def apply(t):
        return None if t is None else fn(t)

    layers = tuple(
        dataclasses.replace(
            layer, **{name: apply(getattr(layer, name)) for name in _LAYER_TENSORS}
        )
        for layer in model.layers
    )
    return ToyTransformer(
        config=model.config,
        token_embedding=apply(model.token_embedding),
        layers=layers,
        final_norm=apply(model.final_norm),
        lm_head=apply(model.lm_head),
    )


def _parameters(model: ToyTransformer) -> list[torch.Tensor]:
    params = [model.token_embedding, model.final_norm, model.lm_head]
    for layer in model.layers:
        params += [
            getattr(layer, name)
            for name in _LAYER_TENSORS
            if getattr(layer, name) is not None
        ]
    return params


def sequence_loss(model: ToyTransformer, window: typing.Sequence[int]) -> torch.Tensor:
    """Mean next-token cross-entropy of one window (differentiable)."""
    tokens = torch.as_tensor(window, dtype=torch.long)
    logits = run(model, tokens[:-1]).logits
    return F.cross_entropy(logits, tokens[1:])


def _batch_loss(model: ToyTransformer, batch: list[list[int]]) -> torch.Tensor:
    return torch.stack([sequence_loss(model, w) for w in batch]).mean()


def _sampler(corpus: list[int], window: int, seed: int):
    span = len(corpus) - window + 1
    if span < 1:
        raise CorpusError(
            f"Corpus of {len(corpus)} tokens is shorter than one window of {window}"
        )
    rng = XorShift64Star(seed)

    def sample(count: int) -> list[list[int]]:
        batch = []
        for _ in range(count):
            start = rng.randint(span)
            batch.append(corpus[start : start + window])
        return batch

    return sample


def train_toy(
    model: ToyTransformer,
    corpus: typing.Sequence[int],
    steps: int,
    lr: float,
    seed: int,
    window: int = 64,
    batch_size: int = 4,
    clip_norm: float = 1.0,
) -> TrainResult:
    """
    Plain SGD on next-token cross-entropy over windows sampled from a token stream.

    Window offsets come from an xorshift64* generator seeded with seed, so identical inputs
    give identical weights.

    Args:
        model: Starting model, left untouched
        corpus: Token stream
        steps: Number of SGD steps, 0 returns the model unchanged
        lr: Learning rate
        seed: Window sampler seed
        window: Tokens per window, capped at max_context + 1
        batch_size: Windows per step
        clip_norm: Gradient norm clip, 0 disables

    Raises:
        CorpusError: Corpus shorter than one window.
    """
    config = TrainConfig(
        steps=steps,
        lr=lr,
        seed=seed,
        window=window,
        batch_size=batch_size,
        clip_norm=clip_norm,
    )
    if config.steps == 0:
        return TrainResult(model, float("nan"), float("nan"), [])

    corpus = [int(t) for t in corpus]
    sample = _sampler(corpus, min(config.window, model.config.max_context + 1), seed)

    trained = _map_tensors(model, lambda t: t.detach().clone().requires_grad_(True))
    params = _parameters(trained)
    optimizer = torch.optim.SGD(params, lr=config.lr)

    first_batch = None
    losses = []
    for step in range(config.steps):
        batch = sample(config.batch_size)
        if first_batch is None:
            first_batch = batch
        optimizer.zero_grad()
        loss = _batch_loss(trained, batch)
        loss.backward()
        if config.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
        optimizer.step()
        losses.append(float(loss))
        if (step + 1) % config.log_every == 0:
            logger.info("step %d/%d loss %.4f", step + 1, config.steps, losses[-1])

    result = _map_tensors(trained, lambda t: t.detach().clone())
    with torch.no_grad():
        final_loss = float(_batch_loss(result, first_batch))
    logger.info("first batch loss %.4f -> %.4f", losses[0], final_loss)
    return TrainResult(result, losses[0], final_loss, losses)


def evaluate_loss(
    model: ToyTransformer,
    corpus: typing.Sequence[int],
    window: int,
    count: int,
    seed: int,
) -> float:
    """Mean cross-entropy over count windows drawn with the training sampler."""
    sample = _sampler([int(t) for t in corpus], window, seed)
    with torch.no_grad():
        return float(_batch_loss(model, sample(count)))
