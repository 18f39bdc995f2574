# app/cli/main.py
"""
Command-line entry point.

    python -m app.cli.main train  --config run.txt [--out DIR] [--seed N] [--threads N]
    python -m app.cli.main eval   --config run.txt --checkpoint ckpt.bin [--scales 0.7,1,1.3] [--split novel|base]
    python -m app.cli.main ablate --config run.txt [--sweep-steps 0..10]
    python -m app.cli.main infer  --checkpoint ckpt.bin --episode-dir DIR [--inner-steps N] [--init-mode MODE]

Exit codes: 0 ok, 2 config error, 3 I/O or format error, 4 numerical failure.
"""
import argparse
import logging
import os
import sys
import time
from typing import List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from app.cli.config import RunConfig, load_config, parse_scales, parse_step_range, write_config_snapshot
from app.embed.checkpoint import load_checkpoint, save_checkpoint
from app.embed.network import EmbedParams, embed_init
from app.episodes.episode_dir import load_episode_dir
from app.episodes.netpbm import write_pgm_labels
from app.episodes.synthetic import EpisodeSampler, make_class_pool
from app.errors import BiOptError, ConfigError, DegenerateEpisodeError, FormatError, NumericalError
from app.eval.evaluate import EvalReport, evaluate, predict_query
from app.eval.metrics import IoUAccumulator
from app.eval.report import (
    AblationRow,
    SweepRow,
    render_summary,
    write_ablation_csv,
    write_eval_csv,
    write_summary,
    write_sweep_csv,
)
from app.initmod.init_module import WeightGenerator
from app.inner.loop import InitMode, InnerConfig
from app.numerics.kernels import cross_entropy
from app.outer.training import TrainResult, support_prototypes, train, trailing_mean_loss, write_train_log
from app.utils.rng import derive_seed
from app.utils.traces import log_trace

logger = logging.getLogger("app.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

# episodes averaged for the final-prediction training loss reported by `ablate`
TRAILING_WINDOW = 500

MODE_LADDER = (InitMode.BASELINE, InitMode.SUPPORT_INIT, InitMode.INIT_MODULE)


def _configure_logging() -> None:
    level = os.getenv("BIOPT_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _threads(args: argparse.Namespace, cfg: Optional[RunConfig]) -> int:
    if args.threads is not None:
        return args.threads
    if cfg is not None and cfg.threads is not None:
        return cfg.threads
    env = os.getenv("BIOPT_THREADS", "1")
    try:
        value = int(env)
    except ValueError as e:
        raise ConfigError(f"BIOPT_THREADS must be an integer, got {env!r}") from e
    if value < 1:
        raise ConfigError(f"BIOPT_THREADS must be >= 1, got {value}")
    return value


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load --config and apply command-line overrides."""
    cfg = load_config(args.config)
    scales = parse_scales(args.scales) if getattr(args, "scales", None) else None
    return cfg.with_overrides(**{
        "seed": args.seed,
        "out_dir": args.out,
        "scales": scales,
        "threads": args.threads,
        "inner.steps": getattr(args, "inner_steps", None),
        "inner.init_mode": getattr(args, "init_mode", None),
    })


def initial_model(cfg: RunConfig) -> Tuple[EmbedParams, WeightGenerator]:
    """Seeded embed kernels and a zero weight generator (omega = 0.5 for every channel)."""
    spec = cfg.embed_spec()
    params = embed_init(spec, derive_seed(cfg.seed, "embed_init"))
    return params, WeightGenerator.zeros(spec.out_channels)


def samplers(cfg: RunConfig, split: str = "novel") -> Tuple[EpisodeSampler, EpisodeSampler]:
    """(training sampler over base classes, evaluation sampler over `split` classes)."""
    ep = cfg.episodes
    try:
        base, novel = make_class_pool(ep.n_base, ep.n_novel, cfg.seed)
    except ValueError as e:
        raise ConfigError(f"episodes: {e}") from e
    eval_pool = novel if split == "novel" else base
    for name, pool in (("base", base), (split, eval_pool)):
        if len(pool) < ep.n_way:
            raise ConfigError(f"episodes.n_way = {ep.n_way} exceeds the {len(pool)} {name} classes")
    train_sampler = EpisodeSampler(tuple(base), ep.n_way, ep.k_shot, ep.img_size, cfg.seed, stream="train")
    eval_sampler = EpisodeSampler(tuple(eval_pool), ep.n_way, ep.k_shot, ep.img_size, cfg.seed, stream=f"eval_{split}")
    return train_sampler, eval_sampler


def check_compatible(params: EmbedParams, gen: WeightGenerator, cfg: RunConfig, path: str) -> None:
    spec = cfg.embed_spec()
    if params.spec != spec:
        expected = [params.expected_shape(i) for i in range(params.spec.n_layers)]
        wanted = [(k, k, spec.widths[i], spec.widths[i + 1]) for i, k in enumerate(spec.kernel_sizes)]
        raise FormatError(
            f"{path}: checkpoint network {expected} (strides {params.spec.strides}, dilations "
            f"{params.spec.dilations}) does not match config {wanted} (strides {spec.strides}, dilations {spec.dilations})"
        )
    if gen.channels != spec.out_channels:
        raise FormatError(f"{path}: generator has {gen.channels} channels, config expects {spec.out_channels}")


def run_training(cfg: RunConfig, sampler: EpisodeSampler, inner_cfg: InnerConfig, threads: int) -> TrainResult:
    params, gen = initial_model(cfg)
    return train(sampler, params, gen, inner_cfg, cfg.outer, threads=threads)


def run_eval(cfg, sampler, params, gen, inner_cfg, threads, keep_predictions=False) -> EvalReport:
    return evaluate(
        sampler.episode,
        cfg.n_eval_episodes,
        params,
        gen,
        inner_cfg,
        scales=cfg.scales,
        threads=threads,
        keep_predictions=keep_predictions,
    )


def _settings(cfg: RunConfig, **extra) -> dict:
    ep = cfg.episodes
    settings = {
        "seed": cfg.seed,
        "episodes": f"{ep.n_way}-way {ep.k_shot}-shot, {ep.img_size}x{ep.img_size}",
        "inner": f"{cfg.inner.init_mode.value}, {cfg.inner.steps} steps, lr {cfg.inner.lr!r}",
        "outer": f"{cfg.outer.epochs} iterations x {cfg.outer.batch} episodes, lr {cfg.outer.lr!r}",
        "scales": ",".join(repr(s) for s in cfg.scales),
    }
    settings.update(extra)
    return settings


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = resolve_config(args)
    threads = _threads(args, cfg)
    train_sampler, _ = samplers(cfg)
    result = run_training(cfg, train_sampler, cfg.inner, threads)

    out = cfg.out_dir
    save_checkpoint(os.path.join(out, "checkpoint.bin"), result.params, result.gen)
    write_train_log(os.path.join(out, "train_log.csv"), result.log)
    write_config_snapshot(os.path.join(out, "config.txt"), cfg)
    logger.info("training finished: %d episodes logged, %d skipped; outputs in %s", len(result.log), result.n_skipped, out)
    log_trace({
        "command": "train",
        "config": cfg.model_dump(mode="json"),
        "episodes": len(result.log),
        "skipped": result.n_skipped,
        "final_loss": result.log[-1].loss_total if result.log else None,
        "elapsed_s": round(time.time() - started, 3),
    })
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = resolve_config(args)
    threads = _threads(args, cfg)
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    params, gen = load_checkpoint(args.checkpoint)
    check_compatible(params, gen, cfg, args.checkpoint)
    _, eval_sampler = samplers(cfg, split=args.split)
    report = run_eval(cfg, eval_sampler, params, gen, cfg.inner, threads, keep_predictions=args.dump_masks)

    out = cfg.out_dir
    write_eval_csv(os.path.join(out, "eval_report.csv"), report)
    summary = render_summary(
        "Evaluation", _settings(cfg, checkpoint=args.checkpoint, split=args.split), report=report
    )
    write_summary(os.path.join(out, "summary.md"), summary)
    if args.dump_masks:
        for seed, j, labels in report.predictions:
            write_pgm_labels(os.path.join(out, "masks", f"pred_{seed}_{j}.pgm"), labels)
    print(f"mean-IoU {report.mean_iou:.4f}")
    print(f"binary-IoU {report.binary_iou:.4f}")
    log_trace({
        "command": "eval",
        "config": cfg.model_dump(mode="json"),
        "checkpoint": args.checkpoint,
        "split": args.split,
        "mean_iou": report.mean_iou,
        "binary_iou": report.binary_iou,
        "n_episodes": report.n_episodes,
        "n_skipped": report.n_skipped,
        "elapsed_s": round(time.time() - started, 3),
    })
    return EXIT_OK


def sweep_inner_steps(
    cfg: RunConfig,
    sampler: EpisodeSampler,
    params: EmbedParams,
    gen: WeightGenerator,
    steps: Sequence[int],
    threads: int,
) -> List[SweepRow]:
    rows = []
    for s in steps:
        inner_cfg = cfg.inner.with_overrides(init_mode=InitMode.INIT_MODULE, steps=s)
        report = run_eval(cfg, sampler, params, gen, inner_cfg, threads)
        rows.append(SweepRow(steps=s, mean_iou=report.mean_iou, binary_iou=report.binary_iou))
        logger.info("sweep: %d inner steps -> mean-IoU %.4f", s, report.mean_iou)
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = resolve_config(args)
    threads = _threads(args, cfg)
    steps = parse_step_range(args.sweep_steps) if args.sweep_steps else None
    train_sampler, eval_sampler = samplers(cfg)
    out = cfg.out_dir

    rows: List[AblationRow] = []
    trained = {}
    for mode in MODE_LADDER:
        inner_cfg = cfg.inner.with_overrides(init_mode=mode)
        logger.info("ablation: training %s", mode.value)
        result = run_training(cfg, train_sampler, inner_cfg, threads)
        trained[mode] = result
        save_checkpoint(os.path.join(out, f"checkpoint_{mode.value}.bin"), result.params, result.gen)
        report = run_eval(cfg, eval_sampler, result.params, result.gen, inner_cfg, threads)
        final_loss = trailing_mean_loss(result.log, TRAILING_WINDOW, mode) if result.log else float("nan")
        rows.append(AblationRow(
            mode=mode.value, mean_iou=report.mean_iou, binary_iou=report.binary_iou, final_train_loss=final_loss
        ))
    write_ablation_csv(os.path.join(out, "ablation.csv"), rows)

    sweep: List[SweepRow] = []
    if steps is not None:
        best = trained[InitMode.INIT_MODULE]
        sweep = sweep_inner_steps(cfg, eval_sampler, best.params, best.gen, steps, threads)
        write_sweep_csv(os.path.join(out, "sweep.csv"), sweep)
    write_config_snapshot(os.path.join(out, "config.txt"), cfg)
    write_summary(os.path.join(out, "summary.md"), render_summary("Ablation", _settings(cfg), ablation=rows, sweep=sweep))
    for r in rows:
        print(f"{r.mode}: mean-IoU {r.mean_iou:.4f}, binary-IoU {r.binary_iou:.4f}")
    log_trace({
        "command": "ablate",
        "config": cfg.model_dump(mode="json"),
        "ablation": [r.model_dump() for r in rows],
        "sweep": [r.model_dump() for r in sweep],
        "elapsed_s": round(time.time() - started, 3),
    })
    return EXIT_OK


def _infer_settings(args: argparse.Namespace, params: EmbedParams, gen: WeightGenerator) -> Tuple[InnerConfig, Tuple[float, ...]]:
    if args.config:
        cfg = resolve_config(args)
        check_compatible(params, gen, cfg, args.checkpoint)
        return cfg.inner, cfg.scales
    try:
        inner_cfg = InnerConfig().with_overrides(steps=args.inner_steps, init_mode=args.init_mode)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return inner_cfg, parse_scales(args.scales) if args.scales else (1.0,)


def cmd_infer(args: argparse.Namespace) -> int:
    started = time.time()
    if not args.checkpoint or not args.episode_dir:
        raise ConfigError("infer needs --checkpoint and --episode-dir")
    params, gen = load_checkpoint(args.checkpoint)
    inner_cfg, scales = _infer_settings(args, params, gen)
    episode = load_episode_dir(args.episode_dir)
    out = args.out or os.path.join(args.episode_dir, "predictions")

    pool, _, _ = support_prototypes(episode, params)
    acc = IoUAccumulator()
    loss_rows = []
    for j, (img, gt) in enumerate(episode.query):
        pred = predict_query(img, pool.protos, params, gen, inner_cfg, scales)
        write_pgm_labels(os.path.join(out, f"pred_{j}.pgm"), pred.labels)
        for scale, state in pred.states.items():
            losses = state.trace.losses if state.trace else [cross_entropy(state.m_prime_soft, state.m_prime)]
            loss_rows.extend((j, scale, step, loss) for step, loss in enumerate(losses))
        if gt is not None:
            acc.add(pred.labels, gt, episode.class_ids)
            acc.n_episodes += 1

    path = os.path.join(out, "inner_loss.csv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query,scale,step,loss\n")
        for j, scale, step, loss in loss_rows:
            fh.write(f"{j},{scale!r},{step},{loss!r}\n")

    trace = {"command": "infer", "episode_dir": args.episode_dir, "checkpoint": args.checkpoint,
             "inner": inner_cfg.model_dump(mode="json"), "scales": list(scales)}
    if acc.n_episodes:
        print(f"mean-IoU {acc.mean_iou():.4f}")
        print(f"binary-IoU {acc.binary_iou():.4f}")
        trace.update(mean_iou=acc.mean_iou(), binary_iou=acc.binary_iou())
    logger.info("wrote %d predicted masks to %s", len(episode.query), out)
    log_trace({**trace, "elapsed_s": round(time.time() - started, 3)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biopt", description="Bi-level prototype optimization for few-shot segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
        p.add_argument("--config", required=config_required, help="key = value run configuration")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="overrides seed")
        p.add_argument("--scales", help="comma-separated test scales, e.g. 0.7,1,1.3")
        p.add_argument("--inner-steps", dest="inner_steps", type=int)
        p.add_argument("--init-mode", dest="init_mode", choices=[m.value for m in InitMode])
        p.add_argument("--threads", type=int)

    p_train = sub.add_parser("train", help="episodic training on base classes")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--split", choices=["novel", "base"], default="novel")
    p_eval.add_argument("--dump-masks", dest="dump_masks", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="train and compare baseline / support_init / init_module")
    common(p_ablate)
    p_ablate.add_argument("--sweep-steps", dest="sweep_steps", help="inner step range A..B for the init_module model")
    p_ablate.set_defaults(func=cmd_ablate)

    p_infer = sub.add_parser("infer", help="predict the queries of an episode directory")
    common(p_infer, config_required=False)
    p_infer.add_argument("--checkpoint")
    p_infer.add_argument("--episode-dir", dest="episode_dir")
    p_infer.set_defaults(func=cmd_infer)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv(dotenv_path=os.path.join(os.getcwd(), ".env"))
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except (FormatError, DegenerateEpisodeError) as e:
        logger.error("format error: %s", e)
        return EXIT_IO
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
    except NumericalError as e:
        logger.error("numerical failure: %s", e)
        return EXIT_NUMERICAL
    except BiOptError as e:
        logger.exception("unexpected failure: %s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
