# Copyright 2024 Tarkan Al-Kazily
"""
Desk-scale grouped-query attention transformer.

Pre-norm decoder with RMSNorm, rotary position embeddings and a SwiGLU (or plain two-layer)
feed-forward block. Weights are float32 row-major matrices laid out so that activations are
multiplied from the left (x @ W). Every forward pass runs in float64.

Each layer remembers which of its ORIGINAL key-value heads and FFN nodes are still present, so
structural surgery and reports can always speak in original indices.
"""

import dataclasses
import math
import typing

import torch
import torch.nn.functional as F

from putri.errors import ConfigError, HeadMaskError, ShapeError, SurgeryError, TokenError
from putri.linalg import ACCUM_DTYPE, STORAGE_DTYPE, Matrix
from putri.rng import XorShift64Star

FFN_KINDS = ("gated", "plain")
ACTIVATIONS = {"relu": F.relu, "gelu": F.gelu, "silu": F.silu}


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """
    Attributes:
        d_model: Embedding width, equal to n_q_heads * head_dim
        n_layers: Number of transformer layers (L)
        n_q_heads: Query heads per layer
        n_kv_heads: Key-value heads per layer (K)
        head_dim: Per-head width, must be even for RoPE
        d_ff: FFN intermediate width
        vocab_size: Number of token ids
        rope_theta: RoPE frequency base
        norm_eps: RMSNorm epsilon
        ffn_kind: "gated" (gate/up/down) or "plain" (fc1/fc2)
        activation: Nonlinearity of the plain FFN
        max_context: Longest token sequence accepted by forward
    """

    d_model: int
    n_layers: int
    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    d_ff: int
    vocab_size: int
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    ffn_kind: str = "gated"
    activation: str = "relu"
    max_context: int = 256

    def __post_init__(self):
        counts = {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_q_heads": self.n_q_heads,
            "n_kv_heads": self.n_kv_heads,
            "head_dim": self.head_dim,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_context": self.max_context,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if self.n_q_heads % self.n_kv_heads != 0:
            raise ConfigError(
                f"n_q_heads {self.n_q_heads} is not a multiple of n_kv_heads {self.n_kv_heads}"
            )
        if self.d_model != self.n_q_heads * self.head_dim:
            raise ConfigError(
                f"d_model {self.d_model} != n_q_heads {self.n_q_heads} * head_dim {self.head_dim}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")
        if self.ffn_kind not in FFN_KINDS:
            raise ConfigError(f"ffn_kind must be one of {FFN_KINDS}, got {self.ffn_kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(
                f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}"
            )
        if self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ConfigError("rope_theta and norm_eps must be positive")

    @property
    def group_size(self) -> int:
        """Query heads sharing one key-value head (G)."""
        return self.n_q_heads // self.n_kv_heads

    @property
    def node_params(self) -> int:
        """Parameters removed with one FFN intermediate node."""
        return (3 if self.ffn_kind == "gated" else 2) * self.d_model

    @property
    def head_params(self) -> int:
        """Parameters removed with one grouped head: K and V columns, G query columns, G wo rows."""
        return 2 * self.d_model * self.head_dim * (1 + self.group_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: typing.Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclasses.dataclass(frozen=True)
class LayerWeights:
    """
    Weights of one transformer layer.

    For the plain FFN kind, gate is None, up holds fc1 and down holds fc2.

    Attributes:
        wq: d_model x (q_live * head_dim)
        wk: d_model x (kv_live * head_dim)
        wv: d_model x (kv_live * head_dim)
        wo: (q_live * head_dim) x d_model
        gate: d_model x ff_live, or None
        up: d_model x ff_live
        down: ff_live x d_model
        attn_norm: RMSNorm scale before attention, length d_model
        ffn_norm: RMSNorm scale before the FFN, length d_model
        kv_heads: Original indices of the live key-value heads, ascending
        ff_nodes: Original indices of the live FFN nodes, ascending
    """

    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix
    gate: Matrix | None
    up: Matrix
    down: Matrix
    attn_norm: torch.Tensor
    ffn_norm: torch.Tensor
    kv_heads: tuple[int, ...]
    ff_nodes: tuple[int, ...]

    @property
    def kv_live(self) -> int:
        return len(self.kv_heads)

    @property
    def ff_live(self) -> int:
        return len(self.ff_nodes)

    def ffn_matrices(self) -> list[Matrix]:
        return [w for w in (self.gate, self.up, self.down) if w is not None]


@dataclasses.dataclass(frozen=True)
class ToyTransformer:
    """
    Full model state. Values are treated as immutable: surgery and training build new models.

    Attributes:
        config: Model hyperparameters
        token_embedding: vocab_size x d_model
        layers: One LayerWeights per layer
        final_norm: RMSNorm scale, length d_model
        lm_head: d_model x vocab_size
    """

    config: ModelConfig
    token_embedding: Matrix
    layers: tuple[LayerWeights, ...]
    final_norm: torch.Tensor
    lm_head: Matrix

    def prunable_params(self) -> tuple[int, int]:
        """
        Returns:
            (F, A): FFN and attention parameter counts. Embeddings, lm_head and norms excluded.
        """
        ffn = 0
        attn = 0
        for layer in self.layers:
            ffn += sum(w.numel() for w in layer.ffn_matrices())
            attn += layer.wq.numel() + layer.wk.numel() + layer.wv.numel() + layer.wo.numel()
        return ffn, attn

    def is_unpruned(self) -> bool:
        return all(
            layer.kv_live == self.config.n_kv_heads and layer.ff_live == self.config.d_ff
            for layer in self.layers
        )

    def replace_layer(self, index: int, layer: LayerWeights) -> "ToyTransformer":
        layers = list(self.layers)
        layers[index] = layer
        return dataclasses.replace(self, layers=tuple(layers))

    def clone(self) -> "ToyTransformer":
        """Deep copy with fresh tensor storage."""

        def copy(t):
            return None if t is None else t.detach().clone()

        layers = tuple(
            dataclasses.replace(
                layer,
                **{
                    f.name: copy(getattr(layer, f.name))
                    for f in dataclasses.fields(layer)
                    if f.name not in ("kv_heads", "ff_nodes")
                },
            )
            for layer in self.layers
        )
        return ToyTransformer(
            config=self.config,
            token_embedding=copy(self.token_embedding),
            layers=layers,
            final_norm=copy(self.final_norm),
            lm_head=copy(self.lm_head),
        )


@dataclasses.dataclass(frozen=True)
class HeadMask:
    """
    Per-layer activity flags over ORIGINAL key-value head indices (True = active).

    A True flag for a head that was physically removed does not bring it back.
    """

    active: tuple[tuple[bool, ...], ...]

    @classmethod
    def all_active(cls, config: ModelConfig) -> "HeadMask":
        return cls(tuple((True,) * config.n_kv_heads for _ in range(config.n_layers)))

    def without_head(self, layer: int, kv_index: int) -> "HeadMask":
        if not (0 <= layer < len(self.active) and 0 <= kv_index < len(self.active[layer])):
            raise HeadMaskError(f"No KV head {kv_index} in layer {layer} of this mask")
        rows = [list(row) for row in self.active]
        rows[layer][kv_index] = False
        return HeadMask(tuple(tuple(row) for row in rows))

    def without_layer(self, layer: int) -> "HeadMask":
        rows = [list(row) for row in self.active]
        rows[layer] = [False] * len(rows[layer])
        return HeadMask(tuple(tuple(row) for row in rows))

    def validate(self, config: ModelConfig):
        if len(self.active) != config.n_layers:
            raise HeadMaskError(
                f"Mask covers {len(self.active)} layers, model has {config.n_layers}"
            )
        for i, row in enumerate(self.active):
            if len(row) != config.n_kv_heads:
                raise HeadMaskError(
                    f"Mask layer {i} has {len(row)} entries, expected {config.n_kv_heads}"
                )


@dataclasses.dataclass
class ForwardResult:
    """
    Attributes:
        logits: T x vocab_size, float64
        taps: layer index -> FFN intermediate activations (T x ff_live, float64)
        residuals: residual stream after the embedding and after every sub-block, float64.
            Entry 2l+1 follows the attention of layer l, entry 2l+2 follows its FFN.
    """

    logits: torch.Tensor
    taps: dict[int, torch.Tensor]
    residuals: list[torch.Tensor]


def init_random(config: ModelConfig, seed: int) -> ToyTransformer:
    """
    Draw a model from the xorshift64* generator. Every matrix is filled row-major from
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)) in a fixed order: embedding, then per layer
    wq, wk, wv, wo, gate (gated only), up, down, then lm_head. Norm scales start at 1.

    Args:
        config: Model configuration
        seed: Generator seed

    Returns:
        New ToyTransformer, identical for identical (config, seed) on every platform.
    """
    rng = XorShift64Star(seed)
    d = config.d_model
    hd = config.head_dim

    def draw(rows: int, cols: int, fan_in: int) -> Matrix:
        values = rng.uniform_list(rows * cols, 1.0 / math.sqrt(fan_in))
        return torch.tensor(values, dtype=STORAGE_DTYPE).view(rows, cols)

    token_embedding = draw(config.vocab_size, d, d)
    layers = []
    for _ in range(config.n_layers):
        wq = draw(d, config.n_q_heads * hd, d)
        wk = draw(d, config.n_kv_heads * hd, d)
        wv = draw(d, config.n_kv_heads * hd, d)
        wo = draw(config.n_q_heads * hd, d, config.n_q_heads * hd)
        gate = draw(d, config.d_ff, d) if config.ffn_kind == "gated" else None
        up = draw(d, config.d_ff, d)
        down = draw(config.d_ff, d, config.d_ff)
        layers.append(
            LayerWeights(
                wq=wq,
                wk=wk,
                wv=wv,
                wo=wo,
                gate=gate,
                up=up,
                down=down,
                attn_norm=torch.ones(d, dtype=STORAGE_DTYPE),
                ffn_norm=torch.ones(d, dtype=STORAGE_DTYPE),
                kv_heads=tuple(range(config.n_kv_heads)),
                ff_nodes=tuple(range(config.d_ff)),
            )
        )
    lm_head = draw(d, config.vocab_size, d)
    return ToyTransformer(
        config=config,
        token_embedding=token_embedding,
        layers=tuple(layers),
        final_norm=torch.ones(d, dtype=STORAGE_DTYPE),
        lm_head=lm_head,
    )


def rms_norm(x: torch.Tensor, scale: torch.Tensor, eps: float) -> torch.Tensor:
    return x * torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + eps) * scale.to(x.dtype)


def rope_tables(length: int, head_dim: int, theta: float) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Returns:
        (cos, sin) tables of shape (length, head_dim / 2) in float64
    """
    inv_freq = 1.0 / (
        theta ** (torch.arange(0, head_dim, 2, dtype=ACCUM_DTYPE) / head_dim)
    )
    angles = torch.arange(length, dtype=ACCUM_DTYPE)[:, None] * inv_freq[None, :]
    return torch.cos(angles), torch.sin(angles)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate channel pairs (i, i + head_dim/2) of x with shape (heads, T, head_dim)."""
    half = x.shape[-1] // 2
    x1 = x[..., :half]
    x2 = x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def _attention(
    layer: LayerWeights,
    config: ModelConfig,
    h: torch.Tensor,
    rope: tuple[torch.Tensor, torch.Tensor],
    active: typing.Sequence[bool] | None,
) -> torch.Tensor | None:
    kv = layer.kv_live
    if kv == 0:
        return None
    keep = None
    if active is not None:
        flags = [bool(active[i]) for i in layer.kv_heads]
        if not any(flags):
            return None
        if not all(flags):
            keep = torch.tensor(flags, dtype=ACCUM_DTYPE)

    length = h.shape[0]
    g = config.group_size
    hd = config.head_dim
    q = (h @ layer.wq.to(ACCUM_DTYPE)).view(length, kv * g, hd).transpose(0, 1)
    k = (h @ layer.wk.to(ACCUM_DTYPE)).view(length, kv, hd).transpose(0, 1)
    v = (h @ layer.wv.to(ACCUM_DTYPE)).view(length, kv, hd).transpose(0, 1)
    q = apply_rope(q, *rope)
    k = apply_rope(k, *rope)
    # query head j * G + i reads key-value head j
    k = k.repeat_interleave(g, dim=0)
    v = v.repeat_interleave(g, dim=0)

    scores = (q @ k.transpose(1, 2)) / math.sqrt(hd)
    future = torch.ones(length, length, dtype=torch.bool).triu(diagonal=1)
    scores = scores.masked_fill(future, float("-inf"))
    out = torch.softmax(scores, dim=-1) @ v
    if keep is not None:
        out = out * keep.repeat_interleave(g)[:, None, None]
    out = out.transpose(0, 1).reshape(length, kv * g * hd)
    return out @ layer.wo.to(ACCUM_DTYPE)


def ffn_intermediate(layer: LayerWeights, config: ModelConfig, h: torch.Tensor) -> torch.Tensor:
    """
    Returns:
        The activations consumed by the down projection (T x ff_live)
    """
    if config.ffn_kind == "gated":
        return F.silu(h @ layer.gate.to(ACCUM_DTYPE)) * (h @ layer.up.to(ACCUM_DTYPE))
    return ACTIVATIONS[config.activation](h @ layer.up.to(ACCUM_DTYPE))


def token_tensor(model: ToyTransformer, tokens: typing.Sequence[int]) -> torch.Tensor:
    """
    Raises:
        TokenError: Empty sequence, sequence longer than max_context or id out of range.
    """
    ids = torch.as_tensor(list(tokens) if not torch.is_tensor(tokens) else tokens)
    ids = ids.to(torch.long).reshape(-1)
    length = ids.numel()
    if length == 0:
        raise TokenError("Cannot run forward on an empty token sequence")
    if length > model.config.max_context:
        raise TokenError(
            f"Sequence of {length} tokens exceeds max context {model.config.max_context}"
        )
    low = int(ids.min())
    high = int(ids.max())
    if low < 0 or high >= model.config.vocab_size:
        raise TokenError(
            f"Token id out of range [0, {model.config.vocab_size}): min {low} max {high}"
        )
    return ids


def run(
    model: ToyTransformer,
    tokens: typing.Sequence[int],
    head_mask: HeadMask | None = None,
    taps: typing.Iterable[int] = (),
    keep_residuals: bool = False,
) -> ForwardResult:
    """
    Full-sequence causal forward pass in float64.

    Autograd is left to the caller: wrap in torch.no_grad() for inference.

    Args:
        model: Model to run
        tokens: Token ids, 1 <= T <= max_context
        head_mask: Optional mask disabling grouped heads without surgery
        taps: Layers whose FFN intermediate activations are captured
        keep_residuals: Record the residual stream after every sub-block

    Raises:
        TokenError: Empty, too long or out-of-vocabulary tokens.
        HeadMaskError: Mask shape does not match the model.
        ShapeError: Tap layer out of range.
    """
    config = model.config
    ids = token_tensor(model, tokens)
    if head_mask is not None:
        head_mask.validate(config)
    tap_layers = set(taps)
    for index in tap_layers:
        if not 0 <= index < config.n_layers:
            raise ShapeError(f"Tap layer {index} out of range for {config.n_layers} layers")

    x = model.token_embedding.to(ACCUM_DTYPE)[ids]
    rope = rope_tables(ids.numel(), config.head_dim, config.rope_theta)
    captured = {}
    residuals = [x] if keep_residuals else []
    for index, layer in enumerate(model.layers):
        active = head_mask.active[index] if head_mask is not None else None
        attn = _attention(
            layer, config, rms_norm(x, layer.attn_norm, config.norm_eps), rope, active
        )
        if attn is not None:
            x = x + attn
        if keep_residuals:
            residuals.append(x)

        z = ffn_intermediate(layer, config, rms_norm(x, layer.ffn_norm, config.norm_eps))
        if index in tap_layers:
            captured[index] = z
        if layer.ff_live > 0:
            x = x + z @ layer.down.to(ACCUM_DTYPE)
        if keep_residuals:
            residuals.append(x)

    x = rms_norm(x, model.final_norm, config.norm_eps)
    logits = x @ model.lm_head.to(ACCUM_DTYPE)
    return ForwardResult(logits=logits, taps=captured, residuals=residuals)


def forward(model: ToyTransformer, tokens: typing.Sequence[int]) -> Matrix:
    """
    Returns:
        T x vocab_size logits as a float32 Matrix
    """
    with torch.no_grad():
        return run(model, tokens).logits.to(STORAGE_DTYPE)


def forward_with_tap(
    model: ToyTransformer, tokens: typing.Sequence[int], layer: int
) -> tuple[Matrix, Matrix]:
    """
    Returns:
        (logits, z) where z is the T x ff_live input of layer's down projection
    """
    with torch.no_grad():
        result = run(model, tokens, taps=(layer,))
    return result.logits.to(STORAGE_DTYPE), result.taps[layer].to(STORAGE_DTYPE)


def apply_head_mask(
    model: ToyTransformer, mask: HeadMask, tokens: typing.Sequence[int]
) -> Matrix:
    """
    Forward pass with every masked-off grouped head contributing nothing, equivalent to
    forward on a model where those heads were removed.

    Raises:
        HeadMaskError: Mask shape does not match the model.
    """
    with torch.no_grad():
        return run(model, tokens, head_mask=mask).logits.to(STORAGE_DTYPE)


def _drop_columns(w: Matrix, start: int, stop: int) -> Matrix:
    return torch.cat([w[:, :start], w[:, stop:]], dim=1).contiguous()


def _drop_rows(w: Matrix, start: int, stop: int) -> Matrix:
    return torch.cat([w[:start, :], w[stop:, :]], dim=0).contiguous()


def remove_kv_head(model: ToyTransformer, layer: int, kv_index: int) -> ToyTransformer:
    """
    Physically remove one grouped head: its K and V columns, its G query columns and the
    matching wo rows.

    Args:
        model: Source model, left untouched
        layer: Layer index
        kv_index: ORIGINAL key-value head index

    Raises:
        SurgeryError: The head is not live.
    """
    weights = model.layers[layer]
    if kv_index not in weights.kv_heads:
        raise SurgeryError(f"KV head {kv_index} of layer {layer} is already removed")
    position = weights.kv_heads.index(kv_index)
    hd = model.config.head_dim
    qd = model.config.group_size * hd
    updated = dataclasses.replace(
        weights,
        wq=_drop_columns(weights.wq, position * qd, (position + 1) * qd),
        wk=_drop_columns(weights.wk, position * hd, (position + 1) * hd),
        wv=_drop_columns(weights.wv, position * hd, (position + 1) * hd),
        wo=_drop_rows(weights.wo, position * qd, (position + 1) * qd),
        kv_heads=tuple(i for i in weights.kv_heads if i != kv_index),
    )
    return model.replace_layer(layer, updated)


def remove_ffn_nodes(
    model: ToyTransformer,
    layer: int,
    keep: typing.Sequence[int],
    allow_empty: bool = False,
) -> ToyTransformer:
    """
    Keep only the listed FFN nodes of a layer, slicing gate/up columns and down rows.

    Args:
        model: Source model, left untouched
        layer: Layer index
        keep: Ascending ORIGINAL node indices, all currently live
        allow_empty: Permit removing the whole FFN block (p_min == 0)

    Raises:
        SurgeryError: Empty keep set without allow_empty, unsorted/duplicate or dead indices.
    """
    weights = model.layers[layer]
    keep = [int(i) for i in keep]
    if not keep and not allow_empty:
        raise SurgeryError(f"Empty FFN keep set for layer {layer}")
    if any(b <= a for a, b in zip(keep, keep[1:])):
        raise SurgeryError(f"FFN keep set for layer {layer} must be strictly ascending")
    live = {node: pos for pos, node in enumerate(weights.ff_nodes)}
    missing = [i for i in keep if i not in live]
    if missing:
        raise SurgeryError(f"FFN nodes {missing} of layer {layer} are out of range or removed")
    if tuple(keep) == weights.ff_nodes:
        return model

    positions = torch.tensor([live[i] for i in keep], dtype=torch.long)
    updated = dataclasses.replace(
        weights,
        gate=None if weights.gate is None else weights.gate[:, positions].contiguous(),
        up=weights.up[:, positions].contiguous(),
        down=weights.down[positions, :].contiguous(),
        ff_nodes=tuple(keep),
    )
    return model.replace_layer(layer, updated)


def replace_down(model: ToyTransformer, layer: int, down: Matrix) -> ToyTransformer:
    """Swap in new down projection weights of the same shape."""
    weights = model.layers[layer]
    if tuple(down.shape) != tuple(weights.down.shape):
        raise SurgeryError(
            f"Down projection shape {tuple(down.shape)} != {tuple(weights.down.shape)}"
        )
    updated = dataclasses.replace(weights, down=down.to(STORAGE_DTYPE).contiguous())
    return model.replace_layer(layer, updated)
