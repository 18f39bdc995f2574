# app/eval/evaluate.py
"""
Episode prediction (single- and multi-scale) and the evaluation loop.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.embed.network import EmbedParams, embed_forward
from app.episodes.synthetic import Episode
from app.errors import DegenerateEpisodeError
from app.eval.metrics import IoUAccumulator
from app.initmod.init_module import WeightGenerator
from app.inner.loop import InnerConfig
from app.inner.pipeline import QueryState, run_query
from app.numerics.kernels import resize_bilinear
from app.outer.training import ordered_map, support_prototypes
from app.proto.prototypes import hard_mask

logger = logging.getLogger(__name__)

EpisodeSource = Callable[[int], Tuple[Episode, int]]


def unique_scales(scales: Sequence[float]) -> List[float]:
    """Sorted distinct scales; averaging duplicate scales changes nothing."""
    if not scales:
        raise ValueError("at least one test scale is required")
    values = sorted({float(s) for s in scales})
    if values[0] <= 0.0:
        raise ValueError(f"scales must be positive, got {values}")
    return values


def scaled_size(size: int, scale: float, factor: int) -> int:
    """size * scale rounded to the nearest positive multiple of the embed downsample factor."""
    return max(factor, int(round(size * scale / factor)) * factor)


@dataclass
class QueryPrediction:
    soft: np.ndarray
    labels: np.ndarray
    states: Dict[float, QueryState] = field(default_factory=dict)


def predict_query(
    img: np.ndarray,
    P_s: np.ndarray,
    params: EmbedParams,
    gen: WeightGenerator,
    inner_cfg: InnerConfig,
    scales: Sequence[float] = (1.0,),
) -> QueryPrediction:
    """Run inference on one query at every scale, upsample each soft map to image size and average."""
    h, w = img.shape[:2]
    factor = params.spec.downsample
    maps = []
    states = {}
    for s in unique_scales(scales):
        h2, w2 = scaled_size(h, s, factor), scaled_size(w, s, factor)
        if (h2, w2) != (h * s, w * s):
            logger.warning("scale %.3g: query resized to %dx%d (multiple of %d)", s, h2, w2, factor)
        feat, _ = embed_forward(resize_bilinear(img, h2, w2), params)
        state = run_query(feat, P_s, gen, inner_cfg)
        states[s] = state
        maps.append(resize_bilinear(state.final_soft, h, w))
    soft = maps[0] if len(maps) == 1 else np.mean(maps, axis=0)
    return QueryPrediction(soft=soft, labels=hard_mask(soft), states=states)


def predict_episode(
    episode: Episode,
    params: EmbedParams,
    gen: WeightGenerator,
    inner_cfg: InnerConfig,
    scales: Sequence[float] = (1.0,),
    query_index: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """Soft map at image resolution and its argmax for one query of the episode."""
    pool, _, _ = support_prototypes(episode, params)
    pred = predict_query(episode.query[query_index][0], pool.protos, params, gen, inner_cfg, scales)
    return pred.soft, pred.labels


class EvalReport:
    """Pooled evaluation result; per-class entries are keyed by global class id."""

    def __init__(self, acc: IoUAccumulator, n_skipped: int = 0, predictions: Optional[List] = None):
        self.intersection = dict(sorted(acc.intersection.items()))
        self.union = dict(sorted(acc.union.items()))
        self.per_class_iou = acc.per_class_iou()
        self.mean_iou = acc.mean_iou()
        self.binary_iou = acc.binary_iou()
        self.n_episodes = acc.n_episodes
        self.n_skipped = n_skipped
        # (episode seed, query index, label mask) when requested
        self.predictions = predictions or []


@dataclass
class _EpisodeResult:
    seed: int
    acc: Optional[IoUAccumulator] = None
    labels: List[np.ndarray] = field(default_factory=list)


def evaluate(
    source: EpisodeSource,
    n_episodes: int,
    params: EmbedParams,
    gen: WeightGenerator,
    inner_cfg: InnerConfig,
    scales: Sequence[float] = (1.0,),
    threads: int = 1,
    keep_predictions: bool = False,
) -> EvalReport:
    """
    Evaluate episodes 0 .. n_episodes - 1 of `source` (index -> (episode, seed)).

    Each episode is predicted independently and reduced to integer counts; counts are summed in
    index order, so the report does not depend on `threads`.
    """
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be >= 1, got {n_episodes}")
    unique_scales(scales)

    def run(index: int) -> _EpisodeResult:
        episode, seed = source(index)
        try:
            pool, _, _ = support_prototypes(episode, params)
        except DegenerateEpisodeError as e:
            logger.warning("skipping evaluation episode seed=%d: %s", seed, e)
            return _EpisodeResult(seed)
        acc = IoUAccumulator()
        result = _EpisodeResult(seed, acc)
        for img, gt in episode.query:
            if gt is None:
                raise ValueError(f"evaluation episode seed={seed} has a query without a ground-truth mask")
            pred = predict_query(img, pool.protos, params, gen, inner_cfg, scales)
            acc.add(pred.labels, gt, episode.class_ids)
            if keep_predictions:
                result.labels.append(pred.labels)
        acc.n_episodes = 1
        return result

    total = IoUAccumulator()
    n_skipped = 0
    predictions = []
    for result in ordered_map(run, list(range(n_episodes)), threads):
        if result.acc is None:
            n_skipped += 1
            continue
        total.merge(result.acc)
        predictions.extend((result.seed, j, labels) for j, labels in enumerate(result.labels))
    if total.n_episodes == 0:
        raise DegenerateEpisodeError(f"all {n_episodes} evaluation episodes were degenerate")
    report = EvalReport(total, n_skipped=n_skipped, predictions=predictions)
    logger.info(
        "evaluated %d episodes (%d skipped): mean-IoU %.4f, binary-IoU %.4f",
        report.n_episodes, n_skipped, report.mean_iou, report.binary_iou,
    )
    return report
