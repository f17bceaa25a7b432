"""Context encoder, EMA target encoder and predictor, trained on masked latent prediction.

One training step, in order:

1. draw one mask ratio for the batch and one mask per example,
2. encode the full grid with the target encoder (no gradient),
3. encode the visible patches with the context encoder and predict the
   masked ones,
4. AdamW on the context encoder, predictor and mask token,
5. EMA of the *updated* context encoder into the target encoder.

All randomness during training comes from ``numpy.random.default_rng((seed,
stream, step))`` so a run can be resumed from any checkpoint and continue
bit-identically.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import masking
from .masking import MaskSpec
from .vit import (
    NonFiniteError,
    ParameterSet,
    ViTConfig,
    count_parameters,
    embed,
    encode,
    init_parameters,
    sincos_pos_encoding,
    transformer,
    truncated_normal,
    value_and_gradients,
)

INIT_STREAM = 0
MASK_STREAM = 1
DATA_STREAM = 2


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    peak_lr: float = 3e-4
    init_lr: float = 1e-6
    warmup_steps: int = 1000
    total_steps: int = 100_000
    tau_base: float = 0.996

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("optim.beta1 and optim.beta2 must lie in (0, 1)")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(
                f"optim.warmup_steps ({self.warmup_steps}) must be < train.total_steps ({self.total_steps}); set both when shortening a run"
            )
        if not 0 <= self.tau_base <= 1:
            raise ValueError("optim.tau_base must lie in [0, 1]")
        if self.weight_decay < 0 or self.eps <= 0 or self.peak_lr < 0 or self.init_lr < 0:
            raise ValueError("optim.weight_decay, eps and learning rates must be non-negative")


@dataclass
class JepaModel:
    ctx: ParameterSet
    tgt: ParameterSet
    pred: ParameterSet
    mask_token: torch.Tensor
    encoder: ViTConfig
    predictor: ViTConfig
    grid: tuple[int, int]

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass
class TrainState:
    step: int
    model: JepaModel
    exp_avg: ParameterSet
    exp_avg_sq: ParameterSet
    optim: OptimizerConfig
    seed: int
    mask_bounds: tuple[float, float] = (0.4, 0.6)
    metrics: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def check_model_configs(encoder: ViTConfig, predictor: ViTConfig) -> None:
    if predictor.input_dim != encoder.embed_dim:
        raise ValueError(
            f"predictor input_dim {predictor.input_dim} must equal encoder embed_dim {encoder.embed_dim}"
        )
    if predictor.output_dim != encoder.embed_dim:
        raise ValueError(
            f"predictor output_dim {predictor.output_dim} must equal encoder embed_dim {encoder.embed_dim}"
        )


def init_model(
    encoder: ViTConfig,
    predictor: ViTConfig,
    grid: tuple[int, int],
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
) -> JepaModel:
    check_model_configs(encoder, predictor)
    ctx = init_parameters(encoder, rng, dtype)
    pred = init_parameters(predictor, rng, dtype)
    mask_token = torch.tensor(truncated_normal(rng, (predictor.embed_dim,)), dtype=dtype)
    tgt = {k: v.clone() for k, v in ctx.items()}
    return JepaModel(ctx, tgt, pred, mask_token, encoder, predictor, tuple(grid))


def trainable(model: JepaModel) -> ParameterSet:
    """Flat view of everything the optimizer updates. The target encoder is not in here."""
    flat = {"ctx." + k: v for k, v in model.ctx.items()}
    flat.update({"pred." + k: v for k, v in model.pred.items()})
    flat["mask_token"] = model.mask_token
    return flat


def with_trainable(model: JepaModel, flat: ParameterSet) -> JepaModel:
    ctx = {k: flat["ctx." + k] for k in model.ctx}
    pred = {k: flat["pred." + k] for k in model.pred}
    return dataclasses.replace(model, ctx=ctx, pred=pred, mask_token=flat["mask_token"])


def parameter_counts(model: JepaModel) -> dict[str, int]:
    encoder = count_parameters(model.ctx)
    predictor = count_parameters(model.pred)
    mask_token = int(model.mask_token.numel())
    return {
        "context_encoder": encoder,
        "target_encoder": count_parameters(model.tgt),
        "predictor": predictor,
        "mask_token": mask_token,
        "trainable": encoder + predictor + mask_token,
        "inference": encoder,
    }


# --- forward passes ---------------------------------------------------------


def mask_indices(masks: list[MaskSpec]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack per-example visible/masked index lists into [B, V] and [B, M] tensors."""
    if len({len(m.masked) for m in masks}) != 1:
        raise ValueError("masks in one group must hide the same number of patches")
    visible = torch.tensor([m.visible for m in masks], dtype=torch.long)
    masked = torch.tensor([m.masked for m in masks], dtype=torch.long)
    return visible, masked


def _gather(tokens: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    return tokens.gather(-2, index.unsqueeze(-1).expand(*index.shape, tokens.shape[-1]))


def forward_context(model: JepaModel, patches: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
    """Encode only the visible patches: ``patches`` [..., N, P], ``visible`` [..., V]."""
    if visible.shape[-1] == 0:
        raise ValueError("context encoder needs at least one visible patch")
    return encode(model.ctx, model.encoder, _gather(patches, visible), visible, model.grid)


def forward_target(model: JepaModel, patches: torch.Tensor) -> torch.Tensor:
    """Encode every patch with the target encoder. The result carries no gradient."""
    positions = torch.arange(patches.shape[-2])
    with torch.no_grad():
        tgt = {k: v.detach() for k, v in model.tgt.items()}
        return encode(tgt, model.encoder, patches, positions, model.grid).detach()


def predict_masked(
    model: JepaModel, context: torch.Tensor, visible: torch.Tensor, masked: torch.Tensor
) -> torch.Tensor:
    """Predict encoder-width embeddings at ``masked`` positions from context tokens.

    Context tokens are projected to predictor width and placed at their grid
    positions; one mask token per masked index is appended, the predictor
    attends over the joint sequence, and the mask-slot outputs are returned.
    """
    if context.shape[-2] != visible.shape[-1]:
        raise ValueError(
            f"context has {context.shape[-2]} tokens but the mask has {visible.shape[-1]} visible"
        )
    cfg = model.predictor
    pos_table = sincos_pos_encoding(model.grid[0], model.grid[1], cfg.embed_dim)
    x_ctx = embed(model.pred, cfg, context, visible, pos_table)
    x_mask = model.mask_token + pos_table.to(x_ctx.dtype)[masked]
    x = torch.cat([x_ctx, x_mask], dim=-2)
    return transformer(model.pred, cfg, x)[..., visible.shape[-1] :, :]


def jepa_loss(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance per masked patch, averaged over masked patches (and the batch)."""
    if pred.shape[-1] != target.shape[-1]:
        raise ValueError(f"prediction width {pred.shape[-1]} != target width {target.shape[-1]}")
    if pred.shape[-2] != masked.shape[-1]:
        raise ValueError(f"{pred.shape[-2]} predictions for {masked.shape[-1]} masked patches")
    diff = pred - _gather(target, masked)
    return (diff * diff).sum(-1).mean()


def batch_loss(
    model: JepaModel, patches: torch.Tensor, masks: list[MaskSpec], target: torch.Tensor
) -> torch.Tensor:
    """Mean per-example loss; examples with different mask sizes are run as separate groups."""
    groups: dict[int, list[int]] = {}
    for i, m in enumerate(masks):
        groups.setdefault(len(m.masked), []).append(i)
    total = 0.0
    for members in groups.values():
        visible, masked = mask_indices([masks[i] for i in members])
        context = forward_context(model, patches[members], visible)
        if not torch.isfinite(context).all():
            raise NonFiniteError("context_encoder")
        pred = predict_masked(model, context, visible, masked)
        if not torch.isfinite(pred).all():
            raise NonFiniteError("predictor")
        total = total + jepa_loss(pred, target[members], masked) * len(members)
    return total / len(masks)


# --- updates ----------------------------------------------------------------


def ema_update(tgt: ParameterSet, ctx: ParameterSet, tau: float) -> ParameterSet:
    if not 0 <= tau <= 1:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if tgt.keys() != ctx.keys():
        raise ValueError("target and context parameter names differ")
    out = {}
    for name, t in tgt.items():
        c = ctx[name]
        if t.shape != c.shape:
            raise ValueError(f"{name}: target shape {tuple(t.shape)} != context shape {tuple(c.shape)}")
        out[name] = (tau * t + (1.0 - tau) * c.detach()).detach()
    return out


def tau_schedule(step: int, total_steps: int, tau_base: float = 0.996) -> float:
    """Cosine ramp of the EMA decay from ``tau_base`` at step 0 to 1 at ``total_steps``."""
    progress = min(max(step / total_steps, 0.0), 1.0)
    return 1.0 - (1.0 - tau_base) * (math.cos(math.pi * progress) + 1.0) / 2.0


def lr_schedule(step: int, cfg: OptimizerConfig) -> float:
    """Linear warmup ``init_lr -> peak_lr`` then cosine decay to zero at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.init_lr + (cfg.peak_lr - cfg.init_lr) * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return 0.0
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str, tensor: torch.Tensor) -> bool:
    # biases, norm parameters and the mask token are all 1-D
    return tensor.ndim >= 2


def adamw_step(state: TrainState, grads: ParameterSet, lr: float, cfg: OptimizerConfig) -> TrainState:
    """One AdamW update (decoupled weight decay, bias-corrected) at optimizer step ``state.step + 1``."""
    params = trainable(state.model)
    if grads.keys() != params.keys():
        extra = sorted(set(grads) - set(params))
        missing = sorted(set(params) - set(grads))
        raise ValueError(f"gradient names do not match trainable parameters: extra={extra} missing={missing}")
    t = state.step + 1
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name].detach()
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"gradient of {name}")
        p = p.detach()
        if decays(name, p):
            p = p * (1.0 - lr * cfg.weight_decay)
        m = cfg.beta1 * state.exp_avg[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.exp_avg_sq[name] + (1.0 - cfg.beta2) * g * g
        update = (m / c1) / ((v / c2).sqrt() + cfg.eps)
        new_params[name] = p - lr * update
        new_m[name], new_v[name] = m, v
    return dataclasses.replace(
        state, model=with_trainable(state.model, new_params), exp_avg=new_m, exp_avg_sq=new_v
    )


# --- training ---------------------------------------------------------------


def init_train_state(
    encoder: ViTConfig,
    predictor: ViTConfig,
    grid: tuple[int, int],
    optim: OptimizerConfig,
    seed: int,
    mask_bounds: tuple[float, float] = (0.4, 0.6),
    dtype: torch.dtype = torch.float32,
    extra: dict | None = None,
) -> TrainState:
    model = init_model(encoder, predictor, grid, np.random.default_rng((seed, INIT_STREAM)), dtype)
    zeros = {k: torch.zeros_like(v) for k, v in trainable(model).items()}
    return TrainState(
        step=0,
        model=model,
        exp_avg=zeros,
        exp_avg_sq={k: v.clone() for k, v in zeros.items()},
        optim=optim,
        seed=seed,
        mask_bounds=tuple(mask_bounds),
        extra=dict(extra or {}),
    )


def step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    return np.random.default_rng((seed, stream, step))


def train_step(
    state: TrainState, patches: torch.Tensor, rng: np.random.Generator | None = None
) -> tuple[TrainState, dict]:
    """Run one optimization + EMA step on a batch ``patches`` [B, N, patch_dim]."""
    model = state.model
    if patches.ndim != 3 or patches.shape[1] != model.num_patches:
        raise ValueError(
            f"expected a batch of shape [B, {model.num_patches}, patch_dim], got {tuple(patches.shape)}"
        )
    patches = patches.to(model.mask_token.dtype)
    if rng is None:
        rng = step_rng(state.seed, MASK_STREAM, state.step)
    lo, hi = state.mask_bounds
    masks = masking.sample_batch_masks(rng, patches.shape[0], model.num_patches, lo, hi)

    target = forward_target(model, patches)
    if not torch.isfinite(target).all():
        raise NonFiniteError("target_encoder")

    def objective(leaves):
        return batch_loss(with_trainable(model, leaves), patches, masks, target)

    loss, grads = value_and_gradients(objective, trainable(model))
    grad_norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))

    cfg = state.optim
    lr = lr_schedule(state.step, cfg)
    tau = tau_schedule(state.step, cfg.total_steps, cfg.tau_base)
    state = adamw_step(state, grads, lr, cfg)
    new_model = dataclasses.replace(
        state.model, tgt=ema_update(state.model.tgt, state.model.ctx, tau)
    )

    dim_var = target.reshape(-1, target.shape[-1]).double().var(dim=0, unbiased=False)
    metrics = {
        "step": state.step,
        "loss": float(loss),
        "lr": lr,
        "tau": tau,
        "grad_norm": grad_norm,
        "mask_ratio": masks[0].ratio,
        "target_variance": float(dim_var.mean()),
        "target_variance_min": float(dim_var.min()),
    }
    state = dataclasses.replace(state, step=state.step + 1, model=new_model, metrics=metrics)
    return state, metrics
