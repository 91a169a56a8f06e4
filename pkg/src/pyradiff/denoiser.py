"""Conditional transformer denoiser: ViT encoder over visible tokens and
a DiT-style decoder predicting noise at masked token positions.

One parameter set serves every pyramid level. The streams entering the
decoder sequence are distinguished by learned type embeddings: noisy
target tokens, encoded visible tokens (training only), source-modality
tokens, upsampled-coarse conditioning tokens (absent at the coarsest
level), plus one learned per-level token. The timestep conditions every
decoder block through adaptive layer-norm modulation; modulation and the
output head start at zero so an untrained model predicts zero noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionStepInput
from .errors import ConfigurationError, ContractError
from .tensor import (
    Tensor,
    concat,
    gather,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)

Array = np.ndarray

# token-type embedding rows
TYPE_NOISY = 0
TYPE_VISIBLE = 1
TYPE_SOURCE = 2
TYPE_COARSE = 3
NUM_TOKEN_TYPES = 4


@dataclass(frozen=True)
class DenoiserConfig:
    embed_dim: int = 64
    num_heads: int = 4
    num_encoder_blocks: int = 2
    num_decoder_blocks: int = 4
    patch_size: int = 8
    channels: int = 1
    finest_grid: tuple[int, int] = (8, 8)
    time_embed_dim: int = 64
    mlp_ratio: int = 4
    num_levels: int = 3
    encode_clean_visible: bool = False

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.time_embed_dim % 2:
            raise ConfigurationError(
                f"time_embed_dim must be even, got {self.time_embed_dim}"
            )
        for field_name in (
            "embed_dim",
            "num_heads",
            "num_encoder_blocks",
            "num_decoder_blocks",
            "patch_size",
            "channels",
            "time_embed_dim",
            "mlp_ratio",
            "num_levels",
        ):
            if getattr(self, field_name) < 1:
                raise ConfigurationError(f"{field_name} must be >= 1")

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def max_tokens(self) -> int:
        return self.finest_grid[0] * self.finest_grid[1]


def grid_position_ids(grid: tuple[int, int], finest_grid: tuple[int, int]) -> Array:
    """Flat finest-frame position id for each token of a level grid.

    A coarse-level token maps to the finest-grid cell covering the same
    physical location, so one positional row is shared across levels.
    """
    gh, gw = grid
    fh, fw = finest_grid
    if gh > fh or gw > fw:
        raise ContractError(
            f"level grid {grid} exceeds the finest grid {finest_grid}"
        )
    rows = (np.arange(gh, dtype=np.int64) * fh) // gh
    cols = (np.arange(gw, dtype=np.int64) * fw) // gw
    return (rows[:, None] * fw + cols[None, :]).reshape(-1)


def timestep_embedding(t, dim: int) -> Array:
    """Sinusoidal timestep features, sin half then cos half."""
    if dim % 2:
        raise ContractError(f"sinusoidal dim must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.min() < 0:
        raise ContractError(f"timesteps must be >= 0, got min {t.min()}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


# ---- parameters ----


def _linear_names(prefix: str) -> tuple[str, str]:
    return f"{prefix}.w", f"{prefix}.b"


def init_params(
    config: DenoiserConfig, rng: np.random.Generator
) -> dict[str, Tensor]:
    """Freshly initialized parameter dict; insertion order is the
    canonical flattening order for checkpoints."""
    d = config.embed_dim
    td = config.token_dim
    hidden = d * config.mlp_ratio
    params: dict[str, Tensor] = {}

    def leaf(name: str, value: Array) -> None:
        params[name] = Tensor(value, requires_grad=True)

    def normal(shape: tuple[int, ...]) -> Array:
        return rng.normal(0.0, 0.02, size=shape)

    def linear(prefix: str, n_in: int, n_out: int, zero: bool = False) -> None:
        w_name, b_name = _linear_names(prefix)
        # fan-in scaling keeps activations order-one from the first step;
        # a flat small scale starves the noisy-token passthrough the
        # denoiser must learn and slows training badly at desk scale
        scale = 1.0 / np.sqrt(n_in)
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, scale, (n_in, n_out))
        leaf(w_name, w)
        leaf(b_name, np.zeros(n_out))

    linear("patch_embed", td, d)
    leaf("pos_table", normal((config.max_tokens, d)))
    leaf("type_embed", normal((NUM_TOKEN_TYPES, d)))
    leaf("level_embed", normal((config.num_levels, d)))
    linear("time_mlp.fc1", config.time_embed_dim, d)
    linear("time_mlp.fc2", d, d)
    for i in range(config.num_encoder_blocks):
        leaf(f"enc{i}.ln1.g", np.ones(d))
        leaf(f"enc{i}.ln1.b", np.zeros(d))
        linear(f"enc{i}.attn.qkv", d, 3 * d)
        linear(f"enc{i}.attn.out", d, d)
        leaf(f"enc{i}.ln2.g", np.ones(d))
        leaf(f"enc{i}.ln2.b", np.zeros(d))
        linear(f"enc{i}.mlp.fc1", d, hidden)
        linear(f"enc{i}.mlp.fc2", hidden, d)
    leaf("enc_out_ln.g", np.ones(d))
    leaf("enc_out_ln.b", np.zeros(d))
    for i in range(config.num_decoder_blocks):
        # zero-initialized modulation: blocks start as identity
        linear(f"dec{i}.mod", d, 6 * d, zero=True)
        linear(f"dec{i}.attn.qkv", d, 3 * d)
        linear(f"dec{i}.attn.out", d, d)
        linear(f"dec{i}.mlp.fc1", d, hidden)
        linear(f"dec{i}.mlp.fc2", hidden, d)
    linear("final.mod", d, 2 * d, zero=True)
    linear("final.out", d, td, zero=True)
    return params


def param_count(config: DenoiserConfig) -> int:
    """Closed-form learnable-parameter count for a config."""
    d = config.embed_dim
    td = config.token_dim
    hidden = d * config.mlp_ratio
    lin = lambda n_in, n_out: n_in * n_out + n_out
    embeddings = (
        lin(td, d)
        + config.max_tokens * d
        + NUM_TOKEN_TYPES * d
        + config.num_levels * d
        + lin(config.time_embed_dim, d)
        + lin(d, d)
    )
    enc_block = 4 * d + lin(d, 3 * d) + lin(d, d) + lin(d, hidden) + lin(hidden, d)
    dec_block = lin(d, 6 * d) + lin(d, 3 * d) + lin(d, d) + lin(d, hidden) + lin(hidden, d)
    final = lin(d, 2 * d) + lin(d, td)
    return (
        embeddings
        + config.num_encoder_blocks * enc_block
        + 2 * d  # encoder output layer norm
        + config.num_decoder_blocks * dec_block
        + final
    )


# ---- forward pieces ----


def _linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    w_name, b_name = _linear_names(prefix)
    return matmul(x, params[w_name]) + params[b_name]


def _attention(
    x: Tensor, params: dict[str, Tensor], prefix: str, num_heads: int
) -> Tensor:
    b, s, d = x.shape
    dh = d // num_heads
    qkv = _linear(x, params, f"{prefix}.qkv")
    q = qkv[:, :, 0 * d : 1 * d]
    k = qkv[:, :, 1 * d : 2 * d]
    v = qkv[:, :, 2 * d : 3 * d]

    def heads(z: Tensor) -> Tensor:
        return transpose(reshape(z, (b, s, num_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(q), heads(k), heads(v)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    out = matmul(softmax(scores), v)
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, s, d))
    return _linear(out, params, f"{prefix}.out")


def _mlp(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return _linear(gelu(_linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def _encoder_block(
    x: Tensor, params: dict[str, Tensor], i: int, config: DenoiserConfig
) -> Tensor:
    h = layer_norm(x, params[f"enc{i}.ln1.g"], params[f"enc{i}.ln1.b"])
    x = x + _attention(h, params, f"enc{i}.attn", config.num_heads)
    h = layer_norm(x, params[f"enc{i}.ln2.g"], params[f"enc{i}.ln2.b"])
    return x + _mlp(h, params, f"enc{i}.mlp")


def _plain_norm(x: Tensor) -> Tensor:
    d = x.shape[-1]
    return layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d)))


def _decoder_block(
    x: Tensor,
    cond_act: Tensor,
    params: dict[str, Tensor],
    i: int,
    config: DenoiserConfig,
) -> Tensor:
    b = x.shape[0]
    d = config.embed_dim
    mod = _linear(cond_act, params, f"dec{i}.mod")

    def piece(j: int) -> Tensor:
        return reshape(mod[:, j * d : (j + 1) * d], (b, 1, d))

    shift_a, scale_a, gate_a = piece(0), piece(1), piece(2)
    shift_m, scale_m, gate_m = piece(3), piece(4), piece(5)
    h = _plain_norm(x) * (1.0 + scale_a) + shift_a
    x = x + gate_a * _attention(h, params, f"dec{i}.attn", config.num_heads)
    h = _plain_norm(x) * (1.0 + scale_m) + shift_m
    return x + gate_m * _mlp(h, params, f"dec{i}.mlp")


def _time_condition(
    t: Array, params: dict[str, Tensor], config: DenoiserConfig
) -> Tensor:
    feats = Tensor(timestep_embedding(t, config.time_embed_dim))
    h = gelu(_linear(feats, params, "time_mlp.fc1"))
    return _linear(h, params, "time_mlp.fc2")


def _embed_tokens(
    tokens,
    positions: Array,
    token_type: int,
    params: dict[str, Tensor],
) -> Tensor:
    x = _linear(_as_tensor3(tokens), params, "patch_embed")
    x = x + gather(params["pos_table"], positions, axis=0)
    return x + gather(params["type_embed"], [token_type], axis=0)


def _as_tensor3(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim != 3:
        raise ContractError(f"token tensors must be (B, N, D), got {t.data.shape}")
    return t


def encode_visible(
    visible_tokens,
    positions: Array,
    params: dict[str, Tensor],
    config: DenoiserConfig,
) -> Tensor:
    """ViT over the visible tokens only; positions are finest-frame ids."""
    visible_tokens = _as_tensor3(visible_tokens)
    n_v = visible_tokens.data.shape[1]
    if n_v < 1:
        raise ContractError("encode_visible needs at least one visible token")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (n_v,):
        raise ContractError(
            f"positions shape {positions.shape} does not match {n_v} visible tokens"
        )
    x = _embed_tokens(visible_tokens, positions, TYPE_VISIBLE, params)
    for i in range(config.num_encoder_blocks):
        x = _encoder_block(x, params, i, config)
    return layer_norm(x, params["enc_out_ln.g"], params["enc_out_ln.b"])


def predict_noise(
    step: DiffusionStepInput,
    params: dict[str, Tensor],
    config: DenoiserConfig,
) -> Tensor:
    """Noise prediction for every masked token position, (B, N_m, p*p*C)."""
    if step.source is None:
        raise ContractError("conditioning incomplete: missing source stream")
    coarsest = step.level == step.num_levels - 1
    if not coarsest and step.coarse is None:
        raise ContractError("conditioning incomplete: missing coarse stream")
    if coarsest and step.coarse is not None:
        raise ContractError("coarse stream not expected at the coarsest level")
    if step.t.min() < 1:
        raise ContractError(f"timesteps must be >= 1, got {step.t.min()}")
    if not 0 <= step.level < config.num_levels:
        raise ContractError(
            f"level {step.level} outside [0, {config.num_levels})"
        )

    pos_map = grid_position_ids(step.grid, config.finest_grid)
    x_masked = _as_tensor3(step.x_masked)
    b, n_m, _ = x_masked.data.shape

    streams = [_embed_tokens(x_masked, pos_map[step.masked_positions], TYPE_NOISY, params)]
    if step.visible is not None and step.visible.shape[1] > 0:
        latents = encode_visible(
            step.visible, pos_map[step.visible_positions], params, config
        )
        latents = latents + gather(params["pos_table"], pos_map[step.visible_positions], axis=0)
        streams.append(latents + gather(params["type_embed"], [TYPE_VISIBLE], axis=0))
    streams.append(
        _embed_tokens(step.source, pos_map[step.source_positions], TYPE_SOURCE, params)
    )
    if step.coarse is not None:
        streams.append(
            _embed_tokens(step.coarse, pos_map[step.source_positions], TYPE_COARSE, params)
        )
    level_row = reshape(gather(params["level_embed"], [step.level], axis=0), (1, 1, -1))
    streams.append(Tensor(np.zeros((b, 1, config.embed_dim))) + level_row)

    x = concat(streams, axis=1)
    cond_act = gelu(_time_condition(step.t, params, config))
    for i in range(config.num_decoder_blocks):
        x = _decoder_block(x, cond_act, params, i, config)

    head = x[:, :n_m, :]
    fmod = _linear(cond_act, params, "final.mod")
    d = config.embed_dim
    shift = reshape(fmod[:, 0:d], (b, 1, d))
    scale = reshape(fmod[:, d : 2 * d], (b, 1, d))
    head = _plain_norm(head) * (1.0 + scale) + shift
    return _linear(head, params, "final.out")
