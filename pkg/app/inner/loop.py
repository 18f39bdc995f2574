# app/inner/loop.py
"""
Inner optimization: plain gradient descent on query prototypes against a frozen target mask.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.errors import NumericalError
from app.numerics.kernels import cross_entropy
from app.proto.prototypes import MIN_NORM, check_prototypes, soft_predict, soft_predict_backward

logger = logging.getLogger(__name__)


class InitMode(str, Enum):
    """Ablation ladder: no inner loop / P_s with M' as target / init module."""
    BASELINE = "baseline"
    SUPPORT_INIT = "support_init"
    INIT_MODULE = "init_module"


class InnerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(10, ge=0)
    lr: float = Field(0.1, ge=0.0)
    alpha: float = Field(20.0, gt=0.0)
    init_mode: InitMode = InitMode.INIT_MODULE

    def with_overrides(self, **changes) -> "InnerConfig":
        """Validated copy with some fields replaced (None values are ignored)."""
        data = self.model_dump()
        data.update({k: v for k, v in changes.items() if v is not None})
        return InnerConfig(**data)


@dataclass
class InnerTrace:
    losses: List[float]
    final_protos: np.ndarray


def inner_loss(Q: np.ndarray, P: np.ndarray, target: np.ndarray, alpha: float) -> float:
    return cross_entropy(soft_predict(Q, P, alpha), target)


def inner_optimize(Q: np.ndarray, P0: np.ndarray, target: np.ndarray, cfg: InnerConfig) -> InnerTrace:
    """
    Run cfg.steps updates P <- P - lr * dL/dP with Q and the target held fixed.

    losses[i] is the loss before update i; losses[-1] is the loss after the last update.
    """
    P = check_prototypes(P0, name="initial query prototypes").copy()
    losses = [inner_loss(Q, P, target, cfg.alpha)]
    for step in range(cfg.steps):
        _, grad_P = soft_predict_backward(Q, P, cfg.alpha, target)
        P = P - cfg.lr * grad_P
        norms = np.linalg.norm(P, axis=1)
        if np.any(norms <= MIN_NORM) or not np.all(np.isfinite(P)):
            raise NumericalError(
                f"query prototype collapsed at inner step {step + 1} (row norms {np.round(norms, 12).tolist()})"
            )
        loss = inner_loss(Q, P, target, cfg.alpha)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite inner loss at step {step + 1}")
        losses.append(loss)
        logger.debug("inner step %d: loss %.6f", step + 1, loss)
    logger.debug("inner loop: %d steps, loss %.6f -> %.6f", cfg.steps, losses[0], losses[-1])
    return InnerTrace(losses=losses, final_protos=P)
