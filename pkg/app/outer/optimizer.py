# app/outer/optimizer.py
"""
SGD with momentum and weight decay for the outer loop.

    g' = g + weight_decay * p
    v  = momentum * v + g'
    p  = p - lr * v
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.embed.network import EmbedGrads, EmbedParams
from app.initmod.init_module import GeneratorGrads, WeightGenerator


class OuterConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lr: float = Field(7e-3, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(5e-4, ge=0.0)
    epochs: int = Field(250, ge=0)
    batch: int = Field(8, ge=1)
    lr_decay_factor: Optional[float] = Field(None, gt=0.0)
    lr_decay_at: Optional[int] = Field(None, ge=0)
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    # divide each mode's loss by the sum of its active weights
    normalize_terms: bool = False
    log_every: int = Field(25, ge=1)

    @model_validator(mode="after")
    def _decay_pair(self) -> "OuterConfig":
        if (self.lr_decay_factor is None) != (self.lr_decay_at is None):
            raise ValueError("lr_decay_factor and lr_decay_at must be set together")
        if any(w < 0 for w in self.loss_weights):
            raise ValueError(f"loss weights must be non-negative, got {self.loss_weights}")
        return self

    def lr_at(self, iteration: int) -> float:
        """Learning rate for a 0-based outer iteration."""
        if self.lr_decay_factor is not None and iteration >= self.lr_decay_at:
            return self.lr * self.lr_decay_factor
        return self.lr


@dataclass
class OptState:
    """Momentum buffers, one per parameter array (embed kernels, then generator W and b)."""
    velocity: List[np.ndarray]

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "OptState":
        return cls([np.zeros_like(a) for a in arrays])


def model_arrays(params: EmbedParams, gen: WeightGenerator) -> List[np.ndarray]:
    return list(params.kernels) + [gen.W, gen.b]


def grad_arrays(egrads: EmbedGrads, ggrads: GeneratorGrads) -> List[np.ndarray]:
    return list(egrads.kernels) + [ggrads.W, ggrads.b]


def sgd_update(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: OptState,
    cfg: OuterConfig,
    lr: Optional[float] = None,
) -> Tuple[List[np.ndarray], OptState]:
    """Return new parameter arrays and momentum state; inputs are left untouched."""
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ValueError(f"got {len(params)} params, {len(grads)} grads, {len(state.velocity)} buffers")
    step = cfg.lr if lr is None else lr
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, state.velocity):
        if not (p.shape == g.shape == v.shape):
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, buffer {v.shape}")
        g_total = g + cfg.weight_decay * p
        v_new = cfg.momentum * v + g_total
        new_params.append(p - step * v_new)
        new_velocity.append(v_new)
    return new_params, OptState(new_velocity)


def apply_update(
    params: EmbedParams,
    gen: WeightGenerator,
    egrads: EmbedGrads,
    ggrads: GeneratorGrads,
    state: OptState,
    cfg: OuterConfig,
    lr: float,
) -> Tuple[EmbedParams, WeightGenerator, OptState]:
    arrays, state = sgd_update(model_arrays(params, gen), grad_arrays(egrads, ggrads), state, cfg, lr)
    n = params.spec.n_layers
    return EmbedParams(params.spec, arrays[:n]), WeightGenerator(arrays[n], arrays[n + 1]), state
