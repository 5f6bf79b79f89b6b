# Copyright 2024 Tarkan Al-Kazily

import dataclasses
import functools

import torch

import putri
import putri.data
import putri.train

CORPUS = "tests/fixture_corpus.txt"
HELDOUT = "tests/fixture_heldout.txt"

SEQ_LEN = 64
N_SEQS = 8


def calib(seed: int = 0, seq_len: int = SEQ_LEN, n_seqs: int = N_SEQS) -> putri.CalibrationSet:
    return putri.load_corpus(CORPUS, seq_len, n_seqs, seed)


def heldout(seed: int = 1, seq_len: int = SEQ_LEN, n_seqs: int = N_SEQS) -> putri.CalibrationSet:
    return putri.load_corpus(HELDOUT, seq_len, n_seqs, seed)


def random_model(preset: str = "tiny", seed: int = 0, **overrides) -> putri.ToyTransformer:
    config = dataclasses.replace(putri.PRESETS[preset], **overrides)
    return putri.init_random(config, seed)


@functools.cache
def training_run() -> putri.train.TrainResult:
    """Tiny preset trained for 500 SGD steps on the fixture corpus, shared by test modules."""
    stream, _ = putri.data.read_tokens(CORPUS)
    model = putri.init_random(putri.PRESETS["tiny"], 0)
    return putri.train_toy(model, stream, steps=500, lr=0.1, seed=0)


def trained_tiny() -> putri.ToyTransformer:
    return training_run().model


def constant_logit_model(columns: dict[int, float], preset: str = "micro") -> putri.ToyTransformer:
    """
    Model whose logits do not depend on the input: every token embeds to the all-ones vector,
    attention and FFN outputs are zero, and lm_head row 0 holds the given logit values
    (scaled by the final RMSNorm factor 1 / sqrt(1 + eps)).
    """
    model = putri.init_random(putri.PRESETS[preset], 0)
    config = model.config
    layers = tuple(
        dataclasses.replace(
            layer, wo=torch.zeros_like(layer.wo), down=torch.zeros_like(layer.down)
        )
        for layer in model.layers
    )
    lm_head = torch.zeros_like(model.lm_head)
    for token, value in columns.items():
        lm_head[0, token] = value
    return dataclasses.replace(
        model,
        token_embedding=torch.ones(config.vocab_size, config.d_model),
        layers=layers,
        lm_head=lm_head,
    )
