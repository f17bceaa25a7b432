"""Minimal pre-norm Vision Transformer over patch tokens.

Parameters live in plain ordered ``dict[str, torch.Tensor]`` so that the
context and target encoders can share one forward function, the EMA and the
optimizer can walk tensors by name, and checkpoints keep stable names.
Positional information comes from a fixed 2D sin-cos table indexed by each
token's flat grid index, so any subset of patches keeps its true position.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

ParameterSet = dict[str, torch.Tensor]

INIT_STD = 0.02
INIT_TRUNCATION = 3.0  # in units of INIT_STD


@dataclass(frozen=True)
class ViTConfig:
    input_dim: int = 256
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    output_dim: Optional[int] = None

    def __post_init__(self):
        if self.input_dim < 1 or self.embed_dim < 1:
            raise ValueError("input_dim and embed_dim must be >= 1")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        # depth 0 is allowed: projection + position + final norm only
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be positive")

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def width(self) -> int:
        return self.output_dim if self.output_dim is not None else self.embed_dim


class NonFiniteError(FloatingPointError):
    def __init__(self, stage: str):
        super().__init__(f"non-finite values produced at stage '{stage}'")
        self.stage = stage


def parameter_shapes(config: ViTConfig) -> dict[str, tuple[int, ...]]:
    d, h = config.embed_dim, config.hidden_dim
    shapes = {
        "input_proj.weight": (d, config.input_dim),
        "input_proj.bias": (d,),
    }
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update(
            {
                p + "norm1.weight": (d,),
                p + "norm1.bias": (d,),
                p + "attn.qkv.weight": (3 * d, d),
                p + "attn.qkv.bias": (3 * d,),
                p + "attn.proj.weight": (d, d),
                p + "attn.proj.bias": (d,),
                p + "norm2.weight": (d,),
                p + "norm2.bias": (d,),
                p + "mlp.fc1.weight": (h, d),
                p + "mlp.fc1.bias": (h,),
                p + "mlp.fc2.weight": (d, h),
                p + "mlp.fc2.bias": (d,),
            }
        )
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    if config.output_dim is not None:
        shapes["output_proj.weight"] = (config.output_dim, d)
        shapes["output_proj.bias"] = (config.output_dim,)
    return shapes


def truncated_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) redrawn outside +-INIT_TRUNCATION standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > INIT_TRUNCATION
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > INIT_TRUNCATION
    return out * std


def init_parameters(
    config: ViTConfig, rng: np.random.Generator, dtype: torch.dtype = torch.float32
) -> ParameterSet:
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight") and len(shape) == 2:
            value = truncated_normal(rng, shape)
        elif "norm" in name and name.endswith(".weight"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = torch.tensor(value, dtype=dtype)
    return params


def count_parameters(params: ParameterSet) -> int:
    return sum(int(t.numel()) for t in params.values())


@functools.lru_cache(maxsize=32)
def sincos_pos_encoding(grid_h: int, grid_w: int, dim: int) -> torch.Tensor:
    """Fixed table [grid_h * grid_w, dim]; first half encodes the row, second the column.

    Each half is ``[sin(pos * w_k), cos(pos * w_k)]`` with ``w_k = 10000^(-k / (dim/4))``.
    Rows follow the frequency-major flat index ``row * grid_w + col``.
    """
    if dim % 4:
        raise ValueError(f"positional encoding dim must be divisible by 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def encode_axis(pos):
        angles = np.outer(pos, omega)
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)

    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    table = np.concatenate([encode_axis(rows.ravel()), encode_axis(cols.ravel())], axis=1)
    return torch.from_numpy(table)


def _layer_norm(x, params, prefix):
    w = params[prefix + ".weight"]
    return F.layer_norm(x, (w.shape[0],), w, params[prefix + ".bias"], eps=1e-6)


def attention(
    x: torch.Tensor, params: ParameterSet, prefix: str, num_heads: int, maps: list | None = None
) -> torch.Tensor:
    *lead, n, d = x.shape
    head_dim = d // num_heads
    qkv = F.linear(x, params[prefix + ".qkv.weight"], params[prefix + ".qkv.bias"])
    qkv = qkv.reshape(*lead, n, 3, num_heads, head_dim).movedim(-3, 0).transpose(-3, -2)
    q, k, v = qkv[0], qkv[1], qkv[2]  # [..., heads, n, head_dim]
    scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
    weights = scores.softmax(dim=-1)
    if maps is not None:
        maps.append(weights.detach())
    out = (weights @ v).transpose(-3, -2).reshape(*lead, n, d)
    return F.linear(out, params[prefix + ".proj.weight"], params[prefix + ".proj.bias"])


def transformer(
    params: ParameterSet, config: ViTConfig, x: torch.Tensor, maps: list | None = None
) -> torch.Tensor:
    """Blocks, final norm and optional output projection over embedded tokens."""
    for i in range(config.depth):
        p = f"blocks.{i}."
        x = x + attention(_layer_norm(x, params, p + "norm1"), params, p + "attn", config.num_heads, maps)
        h = _layer_norm(x, params, p + "norm2")
        h = F.gelu(F.linear(h, params[p + "mlp.fc1.weight"], params[p + "mlp.fc1.bias"]))
        x = x + F.linear(h, params[p + "mlp.fc2.weight"], params[p + "mlp.fc2.bias"])
    x = _layer_norm(x, params, "norm")
    if config.output_dim is not None:
        x = F.linear(x, params["output_proj.weight"], params["output_proj.bias"])
    return x


def embed(
    params: ParameterSet, config: ViTConfig, tokens: torch.Tensor, positions, pos_table: torch.Tensor
) -> torch.Tensor:
    if tokens.shape[-1] != config.input_dim:
        raise ValueError(f"token width {tokens.shape[-1]} != configured input_dim {config.input_dim}")
    x = F.linear(tokens, params["input_proj.weight"], params["input_proj.bias"])
    return x + pos_table.to(x.dtype)[torch.as_tensor(positions)]


def encode(
    params: ParameterSet,
    config: ViTConfig,
    tokens: torch.Tensor,
    positions,
    grid: tuple[int, int],
    maps: list | None = None,
) -> torch.Tensor:
    """Encode ``tokens`` [..., n, input_dim] sitting at flat grid ``positions`` [..., n].

    Pass a list as ``maps`` to collect each block's attention weights.
    """
    pos_table = sincos_pos_encoding(grid[0], grid[1], config.embed_dim)
    return transformer(params, config, embed(params, config, tokens, positions, pos_table), maps)


def value_and_gradients(
    loss_fn: Callable[[ParameterSet], torch.Tensor], params: ParameterSet
) -> tuple[torch.Tensor, ParameterSet]:
    """Scalar ``loss_fn(params)`` and its reverse-mode gradient w.r.t. every tensor in ``params``.

    Tensors the loss does not depend on get all-zero gradients.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    if not torch.is_tensor(loss):
        loss = torch.tensor(float(loss))
    if not torch.isfinite(loss).all():
        raise NonFiniteError("loss")
    if not loss.requires_grad:
        return loss.detach(), {k: torch.zeros_like(v) for k, v in params.items()}
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    return loss.detach(), {
        k: torch.zeros_like(params[k]) if g is None else g for k, g in zip(names, grads)
    }


def gradients(
    loss_fn: Callable[[ParameterSet], torch.Tensor], params: ParameterSet
) -> ParameterSet:
    return value_and_gradients(loss_fn, params)[1]
