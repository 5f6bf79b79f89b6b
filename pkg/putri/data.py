# Copyright 2024 Tarkan Al-Kazily

import dataclasses
import hashlib
import logging
import os
import pathlib

import numpy as np

from putri.errors import ConfigError, CorpusError, TokenError
from putri.rng import XorShift64Star

logger = logging.getLogger(__name__)

BYTE_VOCAB = 256
BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259

PRETOKENIZED_SUFFIX = ".tok"


@dataclasses.dataclass(frozen=True)
class CalibrationSet:
    """
    Fixed-length token sequences for scoring, reconstruction and perplexity.

    Attributes:
        sequences: Token id sequences, each exactly seq_len long
        seq_len: Tokens per sequence, >= 2
        source_digest: sha256 of the source file bytes
    """

    sequences: tuple[tuple[int, ...], ...]
    seq_len: int
    source_digest: str

    def __post_init__(self):
        if self.seq_len < 2:
            raise ConfigError(f"seq_len must be >= 2, got {self.seq_len}")
        for seq in self.sequences:
            if len(seq) != self.seq_len:
                raise ConfigError(
                    f"Sequence of length {len(seq)} in a set with seq_len {self.seq_len}"
                )

    def __len__(self) -> int:
        return len(self.sequences)

    def head(self, count: int) -> "CalibrationSet":
        """The first count sequences."""
        return dataclasses.replace(self, sequences=self.sequences[:count])

    def digest(self) -> str:
        """
        Returns:
            sha256 over seq_len and the sequences as little-endian u32
        """
        h = hashlib.sha256()
        h.update(self.seq_len.to_bytes(4, "little"))
        for seq in self.sequences:
            h.update(np.asarray(seq, dtype="<u4").tobytes())
        return h.hexdigest()

    def check_vocab(self, vocab_size: int):
        """
        Raises:
            TokenError: Some id is >= vocab_size
        """
        for seq in self.sequences:
            if seq and max(seq) >= vocab_size:
                raise TokenError(
                    f"Calibration token {max(seq)} is outside vocab of {vocab_size}"
                )


def tokenize_bytes(text: str) -> list[int]:
    """
    Byte-level tokenization: [BOS] + UTF-8 bytes + [EOS].

    Args:
        text: Any string

    Returns:
        Token ids in [0, 259)
    """
    return [BOS] + list(text.encode("utf-8")) + [EOS]


def decode_bytes(tokens: list[int]) -> str:
    """Inverse of tokenize_bytes for the byte tokens; special tokens are dropped."""
    return bytes(t for t in tokens if t < BYTE_VOCAB).decode("utf-8", errors="replace")


def read_tokens(path: str | os.PathLike, vocab_size: int = VOCAB_SIZE) -> tuple[list[int], str]:
    """
    Tokenize a corpus file. Files ending in .tok hold raw little-endian u32 ids; anything else
    is read as UTF-8 text.

    Returns:
        (token stream, sha256 of the file bytes)

    Raises:
        CorpusError: File unreadable or not decodable.
        TokenError: Pre-tokenized id >= vocab_size.
    """
    path = pathlib.Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CorpusError(f"Cannot read corpus {path}: {e}") from e
    source_digest = hashlib.sha256(raw).hexdigest()

    if path.suffix == PRETOKENIZED_SUFFIX:
        if len(raw) % 4 != 0:
            raise CorpusError(f"Pre-tokenized file {path} length is not a multiple of 4")
        ids = np.frombuffer(raw, dtype="<u4")
        if ids.size and int(ids.max()) >= vocab_size:
            raise TokenError(
                f"Pre-tokenized id {int(ids.max())} is outside vocab of {vocab_size}"
            )
        return [int(i) for i in ids], source_digest

    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorpusError(f"Corpus {path} is not valid UTF-8: {e}") from e
    return tokenize_bytes(text), source_digest


def window_offsets(stream_len: int, seq_len: int, count: int, seed: int) -> list[int]:
    """
    Window start offsets drawn uniformly from [0, stream_len - seq_len). Offset 0 is forced
    when that range is empty.
    """
    span = stream_len - seq_len
    if span <= 0:
        return [0] * count
    rng = XorShift64Star(seed)
    return [rng.randint(span) for _ in range(count)]


def load_corpus(
    path: str | os.PathLike,
    seq_len: int = 128,
    n_sequences: int = 32,
    seed: int = 0,
    vocab_size: int = VOCAB_SIZE,
    pad: bool = True,
) -> CalibrationSet:
    """
    Cut n_sequences windows of seq_len tokens at seeded offsets from a corpus file.

    Args:
        path: UTF-8 text, or .tok pre-tokenized ids
        seq_len: Tokens per sequence, >= 2
        n_sequences: Number of windows, >= 1
        seed: Offset generator seed
        vocab_size: Vocabulary of the paired model
        pad: Fill a short final window with PAD instead of failing

    Raises:
        CorpusError: Unreadable or empty file, or too short with padding disabled.
        TokenError: Pre-tokenized id out of vocabulary.
    """
    if seq_len < 2:
        raise ConfigError(f"seq_len must be >= 2, got {seq_len}")
    if n_sequences < 1:
        raise ConfigError(f"n_sequences must be >= 1, got {n_sequences}")
    stream, source_digest = read_tokens(path, vocab_size)
    if not stream:
        raise CorpusError(f"Corpus {path} is empty")
    if len(stream) < seq_len and not pad:
        raise CorpusError(
            f"Corpus {path} has {len(stream)} tokens, shorter than one window of {seq_len}"
        )

    sequences = []
    for offset in window_offsets(len(stream), seq_len, n_sequences, seed):
        window = stream[offset : offset + seq_len]
        window += [PAD] * (seq_len - len(window))
        sequences.append(tuple(window))

    calib = CalibrationSet(tuple(sequences), seq_len, source_digest)
    logger.info(
        "Loaded %d x %d tokens from %s (stream %d tokens, seed %d)",
        n_sequences,
        seq_len,
        path,
        len(stream),
        seed,
    )
    return calib
