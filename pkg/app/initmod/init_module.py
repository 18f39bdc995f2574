# app/initmod/init_module.py
"""
Init module: temporary query mask and prototypes, the weight generator, initialized query
prototypes P0 = w * P_s + (1 - w) * P', and the frozen inner target mask.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.proto.prototypes import PoolResult, check_prototypes, hard_mask, masked_average_pool, soft_predict

logger = logging.getLogger(__name__)


@dataclass
class WeightGenerator:
    """Shared FC layer 2C -> C followed by a sigmoid; input is concat(P_s[c], P'[c])."""
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] != 2 * self.W.shape[1]:
            raise ValueError(f"generator W must be 2C x C, got shape {self.W.shape}")
        if self.b.shape != (self.W.shape[1],):
            raise ValueError(f"generator b must have shape ({self.W.shape[1]},), got {self.b.shape}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ValueError("weight generator has non-finite entries")

    @classmethod
    def zeros(cls, channels: int) -> "WeightGenerator":
        return cls(np.zeros((2 * channels, channels)), np.zeros(channels))

    @property
    def channels(self) -> int:
        return self.W.shape[1]


@dataclass
class GeneratorGrads:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros_like(cls, gen: WeightGenerator) -> "GeneratorGrads":
        return cls(np.zeros_like(gen.W), np.zeros_like(gen.b))

    def add_(self, other: "GeneratorGrads") -> "GeneratorGrads":
        self.W += other.W
        self.b += other.b
        return self

    def scaled(self, factor: float) -> "GeneratorGrads":
        return GeneratorGrads(self.W * factor, self.b * factor)


@dataclass(frozen=True)
class TempQueryProtos:
    protos: np.ndarray
    pool: PoolResult


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def temp_query_mask(Q: np.ndarray, P_s: np.ndarray, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """Soft and hard temporary query mask from comparing each query pixel with P_s."""
    soft = soft_predict(Q, P_s, alpha)
    return soft, hard_mask(soft)


def temp_query_protos(Q: np.ndarray, m_prime: np.ndarray, fallback: np.ndarray) -> TempQueryProtos:
    """MAP of Q under M'; classes absent from M' take the matching fallback row (P_s)."""
    fallback = np.asarray(fallback, dtype=np.float64)
    pool = masked_average_pool([Q], [m_prime], fallback.shape[0])
    protos = pool.protos.copy()
    empty = pool.counts == 0
    if empty.any():
        logger.debug("temporary query mask has no pixels for classes %s; using support rows", pool.empty_classes)
        protos[empty] = fallback[empty]
    return TempQueryProtos(protos, pool)


def _generator_input(P_s: np.ndarray, P_prime: np.ndarray) -> np.ndarray:
    if P_s.shape != P_prime.shape:
        raise ValueError(f"P_s {P_s.shape} and P' {P_prime.shape} must share a shape")
    return np.concatenate([P_s, P_prime], axis=1)


def generate_weights(P_s: np.ndarray, P_prime: np.ndarray, gen: WeightGenerator) -> np.ndarray:
    """omega[c] = sigmoid(concat(P_s[c], P'[c]) @ W + b), one shared layer for every class."""
    x = _generator_input(np.asarray(P_s, dtype=np.float64), np.asarray(P_prime, dtype=np.float64))
    if x.shape[1] != gen.W.shape[0]:
        raise ValueError(f"prototypes have {P_s.shape[1]} channels but the generator expects {gen.channels}")
    return sigmoid(x @ gen.W + gen.b)


def init_query_protos(P_s: np.ndarray, P_prime: np.ndarray, omega: np.ndarray) -> np.ndarray:
    if not (P_s.shape == P_prime.shape == omega.shape):
        raise ValueError(f"shape mismatch: P_s {P_s.shape}, P' {P_prime.shape}, omega {omega.shape}")
    P0 = omega * P_s + (1.0 - omega) * P_prime
    return check_prototypes(P0, name="initialized query prototypes")


def init_query_protos_backward(
    P_s: np.ndarray,
    P_prime: np.ndarray,
    omega: np.ndarray,
    grad_P0: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (grad_Ps, grad_Pprime, grad_omega) of <grad_P0, P0>."""
    return omega * grad_P0, (1.0 - omega) * grad_P0, grad_P0 * (P_s - P_prime)


def build_target_mask(Q: np.ndarray, P0: np.ndarray, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """Soft map from P0 and its argmax; the soft map feeds the middle loss term."""
    soft = soft_predict(Q, P0, alpha)
    return soft, hard_mask(soft)


def weight_generator_backward(
    P_s: np.ndarray,
    P_prime: np.ndarray,
    gen: WeightGenerator,
    grad_omega: np.ndarray,
) -> Tuple[GeneratorGrads, np.ndarray, np.ndarray]:
    """Returns (generator grads, grad_Ps, grad_Pprime) of <grad_omega, generate_weights(...)>."""
    x = _generator_input(np.asarray(P_s, dtype=np.float64), np.asarray(P_prime, dtype=np.float64))
    omega = sigmoid(x @ gen.W + gen.b)
    dz = grad_omega * omega * (1.0 - omega)
    grads = GeneratorGrads(W=x.T @ dz, b=dz.sum(axis=0))
    dx = dz @ gen.W.T
    c = gen.channels
    return grads, dx[:, :c], dx[:, c:]
