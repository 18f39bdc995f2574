# app/outer/training.py
"""
Outer loop: combined segmentation loss, first-order gradient routing and episodic SGD.

Gradient routing (P_q from the inner loop is a constant):
  - M' term:     into Q and, through MAP, into the support features
  - target term: into Q and P0, hence the weight generator, P_s and P' (P' through MAP of Q)
  - final term:  into Q only
Hard argmax masks carry no gradient.
"""
import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, TypeVar

import numpy as np

from app.embed.network import EmbedCache, EmbedGrads, EmbedParams, embed_backward, embed_forward
from app.episodes.synthetic import Episode, EpisodeSampler
from app.errors import DegenerateEpisodeError, NumericalError
from app.initmod.init_module import (
    GeneratorGrads,
    WeightGenerator,
    init_query_protos_backward,
    weight_generator_backward,
)
from app.inner.loop import InitMode, InnerConfig
from app.inner.pipeline import QueryState, run_query
from app.numerics.kernels import cross_entropy, resize_nearest_labels, softmax_cross_entropy_grad
from app.outer.optimizer import OptState, OuterConfig, apply_update, model_arrays
from app.proto.prototypes import PoolResult, cosine_score_backward, masked_average_pool, masked_average_pool_backward

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

LossWeights = Tuple[float, float, float]

TRAIN_LOG_HEADER = ["iter", "loss_total", "loss_mprime", "loss_target", "loss_final", "episode_seed"]


class LossComponents(NamedTuple):
    mprime: float
    target: float
    final: float


def seg_loss(
    mprime_soft: Optional[np.ndarray],
    target_soft: Optional[np.ndarray],
    final_soft: Optional[np.ndarray],
    gt: np.ndarray,
    weights: LossWeights = (1.0, 1.0, 1.0),
) -> Tuple[float, LossComponents]:
    """
    Weighted sum of cross-entropies of the three soft maps against ground truth.

    A map passed as None is absent for the current init mode and contributes 0.
    """
    values = []
    for soft in (mprime_soft, target_soft, final_soft):
        if soft is None:
            values.append(0.0)
            continue
        if soft.shape[:2] != gt.shape:
            raise ValueError(f"soft map {soft.shape} and ground truth {gt.shape} disagree on H x W")
        values.append(cross_entropy(soft, gt))
    components = LossComponents(*values)
    total = weights[0] * components.mprime + weights[1] * components.target + weights[2] * components.final
    return total, components


def term_weights(mode: InitMode, weights: LossWeights, normalize: bool = False) -> LossWeights:
    """
    Weights of the loss terms `mode` uses, the others zeroed.

    With normalize the active weights are rescaled to sum to 1.
    """
    active = (True, mode == InitMode.INIT_MODULE, mode != InitMode.BASELINE)
    kept = [w if on else 0.0 for w, on in zip(weights, active)]
    total = sum(kept)
    if normalize and total > 0:
        kept = [w / total for w in kept]
    return kept[0], kept[1], kept[2]


def mode_loss_maps(state: QueryState) -> Tuple[Optional[np.ndarray], Optional[np.ndarray], Optional[np.ndarray]]:
    """Soft maps entering the loss: baseline has M' only, support_init has M' and the final map."""
    if state.mode == InitMode.BASELINE:
        return state.m_prime_soft, None, None
    if state.mode == InitMode.SUPPORT_INIT:
        return state.m_prime_soft, None, state.final_soft
    return state.m_prime_soft, state.target_soft, state.final_soft


@dataclass
class QueryForward:
    feat: np.ndarray
    cache: EmbedCache
    gt: np.ndarray
    state: QueryState
    loss: float
    components: LossComponents


@dataclass
class EpisodeForward:
    params: EmbedParams
    gen: WeightGenerator
    inner_cfg: InnerConfig
    weights: LossWeights
    support_caches: List[EmbedCache]
    support_masks: List[np.ndarray]
    pool: PoolResult
    queries: List[QueryForward] = field(default_factory=list)

    @property
    def P_s(self) -> np.ndarray:
        return self.pool.protos

    @property
    def loss(self) -> float:
        return float(np.mean([q.loss for q in self.queries]))

    @property
    def components(self) -> LossComponents:
        return LossComponents(*np.mean([q.components for q in self.queries], axis=0).tolist())

    @property
    def prediction(self) -> List[np.ndarray]:
        return [np.argmax(q.state.final_soft, axis=-1) for q in self.queries]


def support_prototypes(
    episode: Episode,
    params: EmbedParams,
) -> Tuple[PoolResult, List[EmbedCache], List[np.ndarray]]:
    """Embed the support images and pool P_s; raises DegenerateEpisodeError on empty classes."""
    caches, feats, masks = [], [], []
    for img, mask in episode.support:
        feat, cache = embed_forward(img, params)
        caches.append(cache)
        feats.append(feat)
        masks.append(resize_nearest_labels(mask, feat.shape[0], feat.shape[1]))
    pool = masked_average_pool(feats, masks, episode.n_way + 1)
    if pool.empty_classes:
        raise DegenerateEpisodeError(f"classes {pool.empty_classes} have no support pixels at feature resolution")
    return pool, caches, masks


def episode_forward(
    episode: Episode,
    params: EmbedParams,
    gen: WeightGenerator,
    inner_cfg: InnerConfig,
    weights: LossWeights = (1.0, 1.0, 1.0),
    pinned_protos: Optional[Sequence[np.ndarray]] = None,
) -> EpisodeForward:
    """
    embed -> MAP -> init module -> inner loop -> final prediction -> seg_loss, for every query.

    pinned_protos (one per query) replaces the inner-loop output; gradient checks use it to
    evaluate the loss with P_q held at a fixed value.
    """
    pool, caches, masks = support_prototypes(episode, params)
    fwd = EpisodeForward(
        params=params,
        gen=gen,
        inner_cfg=inner_cfg,
        weights=weights,
        support_caches=caches,
        support_masks=masks,
        pool=pool,
    )
    for j, (img, gt_mask) in enumerate(episode.query):
        if gt_mask is None:
            raise ValueError(f"training episode query {j} has no ground-truth mask")
        feat, cache = embed_forward(img, params)
        gt = resize_nearest_labels(gt_mask, feat.shape[0], feat.shape[1])
        pinned = None if pinned_protos is None else pinned_protos[j]
        state = run_query(feat, pool.protos, gen, inner_cfg, pinned_protos=pinned)
        loss, components = seg_loss(*mode_loss_maps(state), gt, weights)
        fwd.queries.append(QueryForward(feat, cache, gt, state, loss, components))
    return fwd


def episode_backward(fwd: EpisodeForward) -> Tuple[EmbedGrads, GeneratorGrads]:
    """First-order gradients of the episode loss with respect to the kernels and generator."""
    w_mprime, w_target, w_final = fwd.weights
    alpha = fwd.inner_cfg.alpha
    scale = 1.0 / len(fwd.queries)
    P_s = fwd.P_s
    grad_Ps = np.zeros_like(P_s)
    gen_grads = GeneratorGrads.zeros_like(fwd.gen)
    egrads = EmbedGrads.zeros_like(fwd.params)

    for q in fwd.queries:
        st = q.state
        Q = q.feat
        grad_Q = np.zeros_like(Q)
        if w_mprime:
            g = (w_mprime * scale) * softmax_cross_entropy_grad(st.m_prime_soft, q.gt)
            dQ, dP = cosine_score_backward(Q, P_s, alpha, g)
            grad_Q += dQ
            grad_Ps += dP
        if st.mode == InitMode.INIT_MODULE and w_target:
            g = (w_target * scale) * softmax_cross_entropy_grad(st.target_soft, q.gt)
            dQ, dP0 = cosine_score_backward(Q, st.P0, alpha, g)
            grad_Q += dQ
            P_prime = st.temp.protos
            dPs_mix, dPprime, domega = init_query_protos_backward(P_s, P_prime, st.omega, dP0)
            g_gen, dPs_gen, dPprime_gen = weight_generator_backward(P_s, P_prime, fwd.gen, domega)
            gen_grads.add_(g_gen)
            grad_Ps += dPs_mix + dPs_gen
            dPprime = dPprime + dPprime_gen
            # rows of P' missing from M' were copied from P_s
            empty = st.temp.pool.counts == 0
            grad_Ps[empty] += dPprime[empty]
            grad_Q += masked_average_pool_backward([st.m_prime], st.temp.pool.counts, dPprime)[0]
        if st.mode != InitMode.BASELINE and w_final:
            g = (w_final * scale) * softmax_cross_entropy_grad(st.final_soft, q.gt)
            dQ, _ = cosine_score_backward(Q, st.P_q, alpha, g)
            grad_Q += dQ
        egrads.add_(embed_backward(q.cache, grad_Q))

    support_grads = masked_average_pool_backward(fwd.support_masks, fwd.pool.counts, grad_Ps)
    for cache, grad_feat in zip(fwd.support_caches, support_grads):
        egrads.add_(embed_backward(cache, grad_feat))
    return egrads, gen_grads


@dataclass(frozen=True)
class TrainLogRow:
    iteration: int
    loss_total: float
    loss_mprime: float
    loss_target: float
    loss_final: float
    episode_seed: int


@dataclass
class TrainResult:
    params: EmbedParams
    gen: WeightGenerator
    log: List[TrainLogRow]
    n_skipped: int = 0


@dataclass
class _EpisodeOutcome:
    seed: int
    loss: float = 0.0
    components: Optional[LossComponents] = None
    grads: Optional[Tuple[EmbedGrads, GeneratorGrads]] = None
    skipped: bool = False


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """map() that may fan out over threads but always returns results in input order."""
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def train(
    sampler: EpisodeSampler,
    params: EmbedParams,
    gen: WeightGenerator,
    inner_cfg: InnerConfig,
    outer_cfg: OuterConfig,
    threads: int = 1,
) -> TrainResult:
    """
    Episodic training. Iteration i consumes episodes i*batch .. i*batch + batch - 1 of the
    sampler, averages their gradients in index order and applies one SGD update.
    """
    state = OptState.zeros_like(model_arrays(params, gen))
    weights = term_weights(inner_cfg.init_mode, outer_cfg.loss_weights, outer_cfg.normalize_terms)
    log: List[TrainLogRow] = []
    n_skipped = 0

    for it in range(outer_cfg.epochs):
        lr = outer_cfg.lr_at(it)
        indices = [it * outer_cfg.batch + b for b in range(outer_cfg.batch)]

        def run(index: int, params=params, gen=gen) -> _EpisodeOutcome:
            episode, ep_seed = sampler.episode(index)
            try:
                fwd = episode_forward(episode, params, gen, inner_cfg, weights)
            except DegenerateEpisodeError as e:
                logger.warning("skipping episode seed=%d: %s", ep_seed, e)
                return _EpisodeOutcome(seed=ep_seed, skipped=True)
            if not np.isfinite(fwd.loss):
                return _EpisodeOutcome(seed=ep_seed, loss=fwd.loss, components=fwd.components)
            return _EpisodeOutcome(ep_seed, fwd.loss, fwd.components, episode_backward(fwd))

        outcomes = ordered_map(run, indices, threads)

        egrads = EmbedGrads.zeros_like(params)
        ggrads = GeneratorGrads.zeros_like(gen)
        used = 0
        for out in outcomes:
            if out.skipped:
                n_skipped += 1
                continue
            if not np.isfinite(out.loss):
                logger.error("non-finite loss at iteration %d, episode seed=%d", it, out.seed)
                raise NumericalError(f"non-finite training loss at iteration {it} (episode seed {out.seed})")
            egrads.add_(out.grads[0])
            ggrads.add_(out.grads[1])
            used += 1
            log.append(TrainLogRow(it, out.loss, *out.components, out.seed))
        if used == 0:
            logger.warning("iteration %d: every episode was skipped; no update", it)
            continue

        params, gen, state = apply_update(
            params, gen, egrads.scaled(1.0 / used), ggrads.scaled(1.0 / used), state, outer_cfg, lr
        )
        if (it + 1) % outer_cfg.log_every == 0 or it == outer_cfg.epochs - 1:
            recent = log[-outer_cfg.log_every * outer_cfg.batch:]
            logger.info(
                "iter %d/%d lr=%.2e mean loss (last %d episodes) %.4f",
                it + 1, outer_cfg.epochs, lr, len(recent), float(np.mean([r.loss_total for r in recent])),
            )
    return TrainResult(params=params, gen=gen, log=log, n_skipped=n_skipped)


def write_train_log(path: str, rows: Sequence[TrainLogRow]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRAIN_LOG_HEADER)
        for r in rows:
            writer.writerow([
                r.iteration,
                repr(r.loss_total),
                repr(r.loss_mprime),
                repr(r.loss_target),
                repr(r.loss_final),
                r.episode_seed,
            ])


def final_prediction_loss(row: TrainLogRow, mode: InitMode) -> float:
    """CE of the prediction a mode ships: M' for baseline, the inner-loop output otherwise."""
    return row.loss_mprime if mode == InitMode.BASELINE else row.loss_final


def trailing_mean_loss(rows: Sequence[TrainLogRow], window: int, mode: Optional[InitMode] = None) -> float:
    """
    Mean over the last `window` logged episodes of the total loss or, given the mode that
    produced the log, of its final-prediction loss.
    """
    if not rows:
        raise ValueError("training log is empty")
    recent = rows[-window:]
    if mode is None:
        return float(np.mean([r.loss_total for r in recent]))
    return float(np.mean([final_prediction_loss(r, mode) for r in recent]))
