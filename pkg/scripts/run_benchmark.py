# scripts/run_benchmark.py
"""
Desk benchmark on synthetic shape episodes.

For every seed: train the baseline / support_init / init_module ladder on a shared episode
stream, evaluate each on novel classes, sweep the init_module model over inner step counts and
compare single-scale with multi-scale testing. Results go to CSVs in --out.

    python scripts/run_benchmark.py --config configs/benchmark.txt --seeds 0,1,2 --out runs/benchmark
"""
import argparse
import csv
import logging
import os
import sys

from dotenv import load_dotenv

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.cli.config import load_config  # noqa: E402
from app.cli.main import MODE_LADDER, TRAILING_WINDOW, run_eval, run_training, samplers, sweep_inner_steps  # noqa: E402
from app.inner.loop import InitMode  # noqa: E402
from app.outer.training import trailing_mean_loss  # noqa: E402

logger = logging.getLogger("benchmark")

MULTI_SCALES = (0.7, 1.0, 1.3)


def _write(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def main() -> int:
    load_dotenv(dotenv_path=os.path.join(os.getcwd(), ".env"))
    logging.basicConfig(level=os.getenv("BIOPT_LOG_LEVEL", "INFO").upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", required=True)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--out", default="runs/benchmark")
    parser.add_argument("--sweep-steps", dest="sweep_steps", type=int, default=10)
    parser.add_argument("--threads", type=int, default=int(os.getenv("BIOPT_THREADS", "1")))
    args = parser.parse_args()

    base_cfg = load_config(args.config)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    os.makedirs(args.out, exist_ok=True)

    ablation_rows, sweep_rows, scale_rows = [], [], []
    for seed in seeds:
        cfg = base_cfg.with_overrides(seed=seed, scales=(1.0,))
        train_sampler, eval_sampler = samplers(cfg)
        trained = {}
        for mode in MODE_LADDER:
            inner_cfg = cfg.inner.with_overrides(init_mode=mode)
            result = run_training(cfg, train_sampler, inner_cfg, args.threads)
            trained[mode] = (result, inner_cfg)
            report = run_eval(cfg, eval_sampler, result.params, result.gen, inner_cfg, args.threads)
            final_loss = trailing_mean_loss(result.log, TRAILING_WINDOW, mode) if result.log else float("nan")
            ablation_rows.append([seed, mode.value, repr(report.mean_iou), repr(report.binary_iou), repr(final_loss)])
            logger.info("seed %d %s: mean-IoU %.4f, trailing loss %.4f", seed, mode.value, report.mean_iou, final_loss)

        best, best_inner = trained[InitMode.INIT_MODULE]
        for row in sweep_inner_steps(cfg, eval_sampler, best.params, best.gen, range(args.sweep_steps + 1), args.threads):
            sweep_rows.append([seed, row.steps, repr(row.mean_iou), repr(row.binary_iou)])

        for scales in ((1.0,), MULTI_SCALES):
            scaled_cfg = cfg.with_overrides(scales=scales)
            report = run_eval(scaled_cfg, eval_sampler, best.params, best.gen, best_inner, args.threads)
            scale_rows.append([seed, ",".join(repr(s) for s in scales), repr(report.mean_iou), repr(report.binary_iou)])

    _write(os.path.join(args.out, "benchmark_ablation.csv"),
           ["seed", "mode", "mean_iou", "binary_iou", "final_train_loss"], ablation_rows)
    _write(os.path.join(args.out, "benchmark_sweep.csv"), ["seed", "steps", "mean_iou", "binary_iou"], sweep_rows)
    _write(os.path.join(args.out, "benchmark_multiscale.csv"), ["seed", "scales", "mean_iou", "binary_iou"], scale_rows)
    print(f"wrote benchmark CSVs to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
