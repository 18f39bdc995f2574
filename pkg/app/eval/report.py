# app/eval/report.py
"""
Result files: EvalReport CSV, ablation and sweep CSVs, and a markdown summary rendered from a
Jinja2 template. Floats are written with repr() so identical runs produce identical bytes.
"""
import csv
import logging
import os
from typing import Iterable, List, Optional, Sequence

from jinja2 import Environment, FileSystemLoader, select_autoescape
from pydantic import BaseModel, ConfigDict

from app.eval.evaluate import EvalReport

logger = logging.getLogger(__name__)

EVAL_HEADER = ["class", "intersection", "union", "iou"]
ABLATION_HEADER = ["mode", "mean_iou", "binary_iou", "final_train_loss"]
SWEEP_HEADER = ["steps", "mean_iou", "binary_iou"]

TEMPLATE_DIR = os.path.join(os.path.dirname(__file__), "templates")


class AblationRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: str
    mean_iou: float
    binary_iou: float
    final_train_loss: float


class SweepRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    steps: int
    mean_iou: float
    binary_iou: float


def _open_csv(path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return open(path, "w", newline="", encoding="utf-8")


def write_eval_csv(path: str, report: EvalReport) -> None:
    """One row per class with a nonempty pooled union, then `mean` and `binary` summary rows."""
    with _open_csv(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVAL_HEADER)
        for cid, value in report.per_class_iou.items():
            writer.writerow([cid, report.intersection[cid], report.union[cid], repr(value)])
        writer.writerow(["mean", "", "", repr(report.mean_iou)])
        writer.writerow(["binary", "", "", repr(report.binary_iou)])


def write_ablation_csv(path: str, rows: Sequence[AblationRow]) -> None:
    with _open_csv(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_HEADER)
        for r in rows:
            writer.writerow([r.mode, repr(r.mean_iou), repr(r.binary_iou), repr(r.final_train_loss)])


def write_sweep_csv(path: str, rows: Sequence[SweepRow]) -> None:
    with _open_csv(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for r in rows:
            writer.writerow([r.steps, repr(r.mean_iou), repr(r.binary_iou)])


def render_summary(
    title: str,
    settings: dict,
    report: Optional[EvalReport] = None,
    ablation: Iterable[AblationRow] = (),
    sweep: Iterable[SweepRow] = (),
) -> str:
    env = Environment(
        loader=FileSystemLoader(TEMPLATE_DIR),
        autoescape=select_autoescape(["html", "xml"]),
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    tpl = env.get_template("summary.md.j2")
    return tpl.render(
        title=title,
        settings=sorted(settings.items()),
        report=report,
        ablation=list(ablation),
        sweep=list(sweep),
    )


def write_summary(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    logger.debug("wrote summary %s", path)


def ablation_ordering_holds(rows: List[AblationRow]) -> bool:
    """True when mean-IoU is non-decreasing along baseline -> support_init -> init_module."""
    by_mode = {r.mode: r.mean_iou for r in rows}
    ladder = [by_mode[m] for m in ("baseline", "support_init", "init_module") if m in by_mode]
    return all(a <= b for a, b in zip(ladder, ladder[1:]))
