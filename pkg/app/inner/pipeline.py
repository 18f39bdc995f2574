# app/inner/pipeline.py
"""
Per-query inference shared by training and evaluation.

Given query features Q and support prototypes P_s, run the configured init mode:

- baseline:     predict with P_s, no inner loop
- support_init: P0 = P_s, target = M'
- init_module:  P0 from the weight generator, target from P0
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.initmod.init_module import (
    TempQueryProtos,
    WeightGenerator,
    build_target_mask,
    generate_weights,
    init_query_protos,
    temp_query_mask,
    temp_query_protos,
)
from app.inner.loop import InitMode, InnerConfig, InnerTrace, inner_optimize
from app.proto.prototypes import soft_predict


@dataclass
class QueryState:
    mode: InitMode
    P_s: np.ndarray
    m_prime_soft: np.ndarray
    m_prime: np.ndarray
    P0: np.ndarray
    target: np.ndarray
    P_q: np.ndarray
    final_soft: np.ndarray
    temp: Optional[TempQueryProtos] = None
    omega: Optional[np.ndarray] = None
    target_soft: Optional[np.ndarray] = None
    trace: Optional[InnerTrace] = None


def run_query(
    Q: np.ndarray,
    P_s: np.ndarray,
    gen: WeightGenerator,
    cfg: InnerConfig,
    pinned_protos: Optional[np.ndarray] = None,
) -> QueryState:
    """
    Init + inner loop + final soft prediction for one query feature map.

    pinned_protos replaces the inner loop's output (used to check gradients with P_q held
    constant); it has no effect in baseline mode.
    """
    m_prime_soft, m_prime = temp_query_mask(Q, P_s, cfg.alpha)
    state = QueryState(
        mode=cfg.init_mode,
        P_s=P_s,
        m_prime_soft=m_prime_soft,
        m_prime=m_prime,
        P0=P_s,
        target=m_prime,
        P_q=P_s,
        final_soft=m_prime_soft,
    )
    if cfg.init_mode == InitMode.BASELINE:
        return state

    if cfg.init_mode == InitMode.INIT_MODULE:
        state.temp = temp_query_protos(Q, m_prime, P_s)
        state.omega = generate_weights(P_s, state.temp.protos, gen)
        state.P0 = init_query_protos(P_s, state.temp.protos, state.omega)
        state.target_soft, state.target = build_target_mask(Q, state.P0, cfg.alpha)

    if pinned_protos is None:
        state.trace = inner_optimize(Q, state.P0, state.target, cfg)
        state.P_q = state.trace.final_protos
    else:
        state.P_q = np.asarray(pinned_protos, dtype=np.float64)
    state.final_soft = soft_predict(Q, state.P_q, cfg.alpha)
    return state
