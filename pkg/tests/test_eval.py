import logging

import numpy as np
import pytest

from app.errors import DegenerateEpisodeError
from app.eval import evaluate as evaluate_mod
from app.eval.evaluate import (
    QueryPrediction,
    evaluate,
    predict_episode,
    scaled_size,
    unique_scales,
)
from app.eval.metrics import IoUAccumulator, binary_iou, class_counts, iou, mean_iou
from app.eval.report import (
    AblationRow,
    SweepRow,
    ablation_ordering_holds,
    render_summary,
    write_ablation_csv,
    write_eval_csv,
    write_sweep_csv,
)
from app.inner.loop import InnerConfig
from app.inner.pipeline import run_query
from app.embed.network import embed_forward
from app.numerics.kernels import resize_bilinear
from app.outer.training import support_prototypes


def test_iou_examples():
    gt = np.array([[1, 1], [1, 1]])
    assert iou(gt, gt, 1) == 1.0
    assert iou(np.array([[1, 0]]), np.array([[0, 1]]), 1) == 0.0
    assert iou(np.array([[1, 1], [0, 0]]), gt, 1) == 0.5
    assert iou(np.zeros((2, 2)), np.zeros((2, 2)), 1) is None
    with pytest.raises(ValueError, match="share a shape"):
        iou(np.zeros((2, 2)), np.zeros((2, 3)), 1)


@pytest.mark.parametrize("seed", range(100))
def test_class_counts_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
    pred, gt = rng.integers(0, n, size=shape), rng.integers(0, n, size=shape)
    inter, union = class_counts(pred, gt, n)
    for c in range(n):
        i = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p == c and g == c)
        u = sum(1 for p, g in zip(pred.ravel(), gt.ravel()) if p == c or g == c)
        assert (inter[c], union[c]) == (i, u)
        expected = None if u == 0 else i / u
        assert iou(pred, gt, c) == expected
        assert iou(gt, pred, c) == expected


def test_class_counts_rejects_out_of_range():
    with pytest.raises(ValueError, match="labels"):
        class_counts(np.array([[3]]), np.array([[0]]), 2)


def test_mean_iou_examples():
    gt = np.array([[1, 1, 1, 1, 1]])
    single = [(np.array([[1, 1, 0, 0, 0]]), gt, [4])]
    assert mean_iou(single) == iou(single[0][0], gt, 1)
    two_classes = single + [(np.array([[1, 1, 1, 0, 0]]), gt, [9])]
    assert mean_iou(two_classes) == pytest.approx(0.5, abs=1e-15)


def test_mean_iou_pools_counts_across_episodes():
    # episode 1: I=2, U=4; episode 2: I=1, U=1 -> pooled 3/5, per-episode mean 0.75
    results = [
        (np.array([[1, 1], [0, 0]]), np.ones((2, 2), dtype=int), [3]),
        (np.array([[1, 0], [0, 0]]), np.array([[1, 0], [0, 0]]), [3]),
    ]
    assert mean_iou(results) == pytest.approx(0.6, abs=1e-15)
    assert mean_iou(results[::-1]) == mean_iou(results)
    with pytest.raises(ValueError):
        mean_iou([])


def test_binary_iou_examples():
    gt = np.array([[1, 1], [0, 0]])
    assert binary_iou(gt, gt) == 1.0
    assert binary_iou(np.zeros((2, 2), dtype=int), gt) == pytest.approx(0.25)
    assert binary_iou(1 - gt, gt) == 0.0
    # two foreground labels count as one class
    assert binary_iou(np.array([[2, 1], [0, 0]]), gt) == 1.0


def test_accumulator_merge_matches_single_pass(rng):
    items = [(rng.integers(0, 3, size=(4, 4)), rng.integers(0, 3, size=(4, 4)), [5, 7]) for _ in range(4)]
    whole = IoUAccumulator()
    for pred, gt, ids in items:
        whole.add(pred, gt, ids)
    left, right = IoUAccumulator(), IoUAccumulator()
    for pred, gt, ids in items[:2]:
        left.add(pred, gt, ids)
    for pred, gt, ids in items[2:]:
        right.add(pred, gt, ids)
    merged = left.merge(right)
    assert merged.intersection == whole.intersection and merged.union == whole.union
    assert merged.binary_iou() == whole.binary_iou()


def test_unique_scales_and_scaled_size():
    assert unique_scales([1.3, 1.0, 0.7, 1.0]) == [0.7, 1.0, 1.3]
    with pytest.raises(ValueError):
        unique_scales([])
    with pytest.raises(ValueError, match="positive"):
        unique_scales([0.0, 1.0])
    assert scaled_size(64, 1.0, 8) == 64
    assert scaled_size(64, 0.7, 8) == 48
    assert scaled_size(64, 1.3, 8) == 80
    assert scaled_size(16, 0.01, 4) == 4


def _first_usable(sampler, params):
    for index in range(200):
        episode, _ = sampler.episode(index)
        try:
            support_prototypes(episode, params)
            return episode
        except DegenerateEpisodeError:
            continue
    raise AssertionError("no usable episode")


def test_single_scale_matches_direct_inference(small_sampler, tiny_model):
    params, gen = tiny_model
    episode = _first_usable(small_sampler, params)
    cfg = InnerConfig(steps=2)
    soft, labels = predict_episode(episode, params, gen, cfg, scales=[1.0])
    pool, _, _ = support_prototypes(episode, params)
    img = episode.query[0][0]
    feat, _ = embed_forward(resize_bilinear(img, 16, 16), params)
    direct = resize_bilinear(run_query(feat, pool.protos, gen, cfg).final_soft, 16, 16)
    np.testing.assert_array_equal(soft, direct)
    np.testing.assert_array_equal(labels, direct.argmax(axis=-1))


def test_duplicate_scales_match_single_scale(small_sampler, tiny_model):
    params, gen = tiny_model
    episode = _first_usable(small_sampler, params)
    cfg = InnerConfig(steps=2)
    one = predict_episode(episode, params, gen, cfg, scales=[1.0])
    three = predict_episode(episode, params, gen, cfg, scales=[1.0, 1.0, 1.0])
    np.testing.assert_array_equal(one[0], three[0])
    np.testing.assert_array_equal(one[1], three[1])


def test_multi_scale_handles_indivisible_sizes(small_sampler, tiny_model):
    params, gen = tiny_model
    episode = _first_usable(small_sampler, params)
    soft, labels = predict_episode(episode, params, gen, InnerConfig(steps=2), scales=[0.7, 1.0, 1.3])
    assert soft.shape == (16, 16, 2) and labels.shape == (16, 16)
    np.testing.assert_allclose(soft.sum(axis=-1), 1.0, atol=1e-12)


def test_scale_rounding_is_logged_as_warning(small_sampler, tiny_model, caplog):
    params, gen = tiny_model
    episode = _first_usable(small_sampler, params)
    with caplog.at_level(logging.WARNING, logger="app.eval.evaluate"):
        predict_episode(episode, params, gen, InnerConfig(steps=0), scales=[0.7, 1.0])
    rounded = [r for r in caplog.records if "query resized" in r.getMessage()]
    assert len(rounded) == 1 and rounded[0].levelno == logging.WARNING
    assert "12x12" in rounded[0].getMessage()


def test_evaluate_is_deterministic_and_thread_independent(small_sampler, tiny_model):
    params, gen = tiny_model
    cfg = InnerConfig(steps=2)
    runs = [evaluate(small_sampler.episode, 6, params, gen, cfg, threads=t, keep_predictions=True) for t in (1, 1, 3)]
    for other in runs[1:]:
        assert other.intersection == runs[0].intersection
        assert other.union == runs[0].union
        assert other.mean_iou == runs[0].mean_iou
        assert other.binary_iou == runs[0].binary_iou
        assert [(s, j) for s, j, _ in other.predictions] == [(s, j) for s, j, _ in runs[0].predictions]
    report = runs[0]
    assert report.n_episodes + report.n_skipped == 6
    assert 0.0 <= report.mean_iou <= 1.0 and 0.0 <= report.binary_iou <= 1.0
    assert all(labels.shape == (16, 16) for _, _, labels in report.predictions)


def _patched_predictor(monkeypatch, episodes, make_labels):
    lookup = {id(ep.query[0][0]): ep.query[0][1] for ep, _ in episodes}

    def fake_predict(img, *args, **kwargs):
        return QueryPrediction(soft=None, labels=make_labels(lookup[id(img)]))

    monkeypatch.setattr(evaluate_mod, "predict_query", fake_predict)


def test_oracle_and_constant_predictors(monkeypatch, small_sampler, tiny_model):
    params, gen = tiny_model
    episodes = [small_sampler.episode(i) for i in range(8)]

    _patched_predictor(monkeypatch, episodes, lambda gt: gt.copy())
    perfect = evaluate(lambda i: episodes[i], 8, params, gen, InnerConfig())
    assert perfect.mean_iou == 1.0 and perfect.binary_iou == 1.0

    _patched_predictor(monkeypatch, episodes, np.zeros_like)
    background = evaluate(lambda i: episodes[i], 8, params, gen, InnerConfig())
    assert background.mean_iou == 0.0
    assert 0.0 < background.binary_iou < 0.5


def test_evaluate_raises_when_every_episode_is_degenerate(monkeypatch, small_sampler, tiny_model):
    params, gen = tiny_model

    def degenerate(*args, **kwargs):
        raise DegenerateEpisodeError("classes [1] have no support pixels at feature resolution")

    monkeypatch.setattr(evaluate_mod, "support_prototypes", degenerate)
    with pytest.raises(DegenerateEpisodeError, match="all 3"):
        evaluate(small_sampler.episode, 3, params, gen, InnerConfig())


def _report():
    acc = IoUAccumulator()
    acc.add(np.array([[1, 1], [0, 2]]), np.array([[1, 0], [0, 2]]), [4, 6])
    acc.n_episodes = 1
    return evaluate_mod.EvalReport(acc, n_skipped=2)


def test_write_eval_csv(tmp_path):
    path = tmp_path / "eval_report.csv"
    write_eval_csv(str(path), _report())
    lines = path.read_text(encoding="utf-8").splitlines()
    # binary: foreground 2/3, background 1/2
    assert lines[-1].startswith("binary,,,") and float(lines[-1].split(",")[-1]) == pytest.approx(7 / 12)
    assert lines[:-1] == [
        "class,intersection,union,iou",
        "4,1,2,0.5",
        "6,1,1,1.0",
        "mean,,,0.75",
    ]


def test_ablation_and_sweep_csv(tmp_path):
    rows = [
        AblationRow(mode="baseline", mean_iou=0.25, binary_iou=0.5, final_train_loss=0.75),
        AblationRow(mode="support_init", mean_iou=0.3, binary_iou=0.5, final_train_loss=0.7),
        AblationRow(mode="init_module", mean_iou=0.35, binary_iou=0.55, final_train_loss=0.65),
    ]
    write_ablation_csv(str(tmp_path / "ablation.csv"), rows)
    lines = (tmp_path / "ablation.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "mode,mean_iou,binary_iou,final_train_loss"
    assert lines[1] == "baseline,0.25,0.5,0.75"
    assert len(lines) == 4
    assert ablation_ordering_holds(rows)
    assert not ablation_ordering_holds([rows[0].model_copy(update={"mean_iou": 0.4}), rows[1]])

    write_sweep_csv(str(tmp_path / "sweep.csv"), [SweepRow(steps=s, mean_iou=0.1 * s, binary_iou=0.5) for s in range(3)])
    sweep = (tmp_path / "sweep.csv").read_text(encoding="utf-8").splitlines()
    assert sweep[0] == "steps,mean_iou,binary_iou"
    assert [line.split(",")[0] for line in sweep[1:]] == ["0", "1", "2"]


def test_render_summary_sections():
    text = render_summary("eval run", {"seed": 3, "scales": "1.0"}, report=_report())
    assert text.startswith("# eval run")
    assert "| seed | 3 |" in text
    assert "mean-IoU: 0.7500" in text
    assert "episodes evaluated: 1 (2 skipped)" in text
    assert "Init-mode ladder" not in text

    ladder = render_summary("ablate", {}, ablation=[AblationRow(mode="baseline", mean_iou=0.5, binary_iou=0.5,
                                                                 final_train_loss=1.0)],
                            sweep=[SweepRow(steps=0, mean_iou=0.5, binary_iou=0.5)])
    assert "| baseline | 0.5000 | 0.5000 | 1.0000 |" in ladder
    assert "| 0 | 0.5000 | 0.5000 |" in ladder
    assert render_summary("ablate", {}) == render_summary("ablate", {})
