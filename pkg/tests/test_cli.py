import json

import numpy as np
import pytest

from app.cli.config import (
    RunConfig,
    format_config,
    load_config,
    parse_config_text,
    parse_scales,
    parse_step_range,
)
from app.cli.main import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    MODE_LADDER,
    TRAILING_WINDOW,
    initial_model,
    main,
    run_training,
    samplers,
)
from app.embed.checkpoint import MAGIC, load_checkpoint
from app.episodes.episode_dir import save_episode_dir
from app.episodes.netpbm import read_pgm_labels
from app.episodes.synthetic import all_shape_classes, gen_episode
from app.errors import ConfigError
from app.eval.evaluate import predict_episode
from app.inner.loop import InitMode, InnerConfig
from app.outer.training import trailing_mean_loss

SMOKE = """\
# tiny run
seed = 3
n_eval_episodes = 3
embed.widths = 3,4,8
episodes.n_way = 1
episodes.img_size = 32
episodes.n_base = 3
episodes.n_novel = 2
inner.steps = 2
outer.epochs = 2
outer.batch = 2
outer.log_every = 1
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.delenv("BIOPT_THREADS", raising=False)
    return tmp_path


def _config(path, text=SMOKE, **extra):
    body = text + "".join(f"{k} = {v}\n" for k, v in extra.items())
    path.write_text(body, encoding="utf-8")
    return str(path)


def test_parse_config_defaults_and_sections():
    cfg = parse_config_text(SMOKE)
    assert cfg.seed == 3
    assert cfg.embed.widths == (3, 4, 8)
    assert cfg.inner.steps == 2 and cfg.inner.lr == 0.1 and cfg.inner.init_mode is InitMode.INIT_MODULE
    assert cfg.outer.momentum == 0.9 and cfg.outer.weight_decay == 5e-4
    assert cfg.scales == (1.0,)
    assert cfg.embed_spec().downsample == 4


def test_unknown_key_names_line():
    with pytest.raises(ConfigError, match=r"line 2: unknown key 'inner.stpes'"):
        parse_config_text("seed = 1\ninner.stpes = 3\n", source="run.txt")


def test_duplicate_and_malformed_lines():
    with pytest.raises(ConfigError, match="duplicate key 'seed'"):
        parse_config_text("seed = 1\nseed = 2\n")
    with pytest.raises(ConfigError, match="line 1: expected `key = value`"):
        parse_config_text("seed 1\n")


def test_invalid_value_names_line_and_key():
    with pytest.raises(ConfigError, match=r"line 2: inner.lr"):
        parse_config_text("seed = 1\ninner.lr = -0.5\n")
    with pytest.raises(ConfigError, match="seed"):
        parse_config_text("inner.steps = 3\n")


def test_bad_scales_rejected_at_parse():
    with pytest.raises(ConfigError, match=r"line 2: scales"):
        parse_config_text("seed = 1\nscales = 0,-1\n")
    with pytest.raises(ConfigError, match="scales"):
        parse_config_text("seed = 1\nscales = \n")


def test_embed_widths_must_start_with_image_channels():
    with pytest.raises(ConfigError, match=r"line 2: embed.widths"):
        parse_config_text("seed = 1\nembed.widths = 5,4,8\n")


def test_unbuildable_embed_spec_rejected_at_parse():
    with pytest.raises(ConfigError, match="embed"):
        parse_config_text("seed = 1\nembed.widths = 3,4,8\nembed.strides = 2\n")


def test_image_size_must_fit_downsample_factor():
    with pytest.raises(ConfigError, match="img_size = 30"):
        parse_config_text(SMOKE.replace("episodes.img_size = 32", "episodes.img_size = 30"))
    with pytest.raises(ConfigError, match="img_size"):
        parse_config_text(SMOKE).with_overrides(**{"episodes.img_size": 33})


def test_bad_scales_exit_with_config_error_before_training(workdir):
    cfg = _config(workdir / "run.txt", scales="0,-1")
    assert main(["ablate", "--config", cfg, "--out", str(workdir / "ablate")]) == EXIT_CONFIG
    assert not (workdir / "ablate").exists()


def test_snapshot_round_trip():
    cfg = parse_config_text(
        SMOKE + "scales = 0.7,1,1.3\nouter.lr_decay_factor = 0.1\nouter.lr_decay_at = 100\n"
        "inner.init_mode = support_init\nembed.final_relu = true\nouter.loss_weights = 1,0.5,1\n"
    )
    text = format_config(cfg)
    assert "embed.strides = \n" in text
    assert parse_config_text(text) == cfg


def test_overrides_are_validated():
    cfg = parse_config_text(SMOKE)
    changed = cfg.with_overrides(**{"seed": 9, "inner.steps": 0, "out_dir": None})
    assert changed.seed == 9 and changed.inner.steps == 0 and changed.out_dir == cfg.out_dir
    with pytest.raises(ConfigError, match="inner.steps"):
        cfg.with_overrides(**{"inner.steps": -1})


def test_flag_parsers():
    assert parse_scales("0.7, 1,1.3") == (0.7, 1.0, 1.3)
    with pytest.raises(ConfigError):
        parse_scales("1,x")
    with pytest.raises(ConfigError):
        parse_scales("0")
    assert parse_step_range("0..3") == [0, 1, 2, 3]
    with pytest.raises(ConfigError):
        parse_step_range("3..1")
    with pytest.raises(ConfigError):
        parse_step_range("5")


def test_missing_seed_exits_with_config_error(workdir, caplog):
    cfg = _config(workdir / "run.txt", SMOKE.replace("seed = 3\n", ""))
    assert main(["train", "--config", cfg]) == EXIT_CONFIG
    assert "seed" in caplog.text


def test_missing_config_file_exits_with_config_error(workdir):
    assert main(["train", "--config", str(workdir / "nope.txt")]) == EXIT_CONFIG


def test_train_is_reproducible(workdir):
    cfg = _config(workdir / "run.txt")
    names = ("train_log.csv", "checkpoint.bin", "config.txt")
    assert main(["train", "--config", cfg, "--out", str(workdir / "a")]) == EXIT_OK
    first = {name: (workdir / "a" / name).read_bytes() for name in names}
    assert main(["train", "--config", cfg, "--out", str(workdir / "a")]) == EXIT_OK
    for name in names:
        assert (workdir / "a" / name).read_bytes() == first[name]

    log = (workdir / "a" / "train_log.csv").read_text(encoding="utf-8").splitlines()
    assert log[0] == "iter,loss_total,loss_mprime,loss_target,loss_final,episode_seed"
    snapshot = load_config(str(workdir / "a" / "config.txt"))
    assert snapshot == load_config(cfg).with_overrides(out_dir=str(workdir / "a"))

    traces = (workdir / "logs" / "biopt_traces.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["command"] for line in traces] == ["train", "train"]


def test_zero_epochs_checkpoint_equals_initialization(workdir):
    cfg = _config(workdir / "run.txt", SMOKE.replace("outer.epochs = 2", "outer.epochs = 0"))
    assert main(["train", "--config", cfg, "--out", str(workdir / "out")]) == EXIT_OK
    params, gen = load_checkpoint(str(workdir / "out" / "checkpoint.bin"))
    init_params, init_gen = initial_model(load_config(cfg))
    for a, b in zip(params.kernels, init_params.kernels):
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(gen.W, init_gen.W)
    assert (workdir / "out" / "train_log.csv").read_text(encoding="utf-8").count("\n") == 1


@pytest.fixture
def trained(workdir):
    cfg = _config(workdir / "run.txt")
    assert main(["train", "--config", cfg, "--out", str(workdir / "train")]) == EXIT_OK
    return cfg, str(workdir / "train" / "checkpoint.bin")


def test_eval_writes_report_and_prints_metrics(workdir, trained, capsys):
    cfg, ckpt = trained
    out = workdir / "eval"
    assert main(["eval", "--config", cfg, "--checkpoint", ckpt, "--out", str(out), "--dump-masks"]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "mean-IoU" in printed and "binary-IoU" in printed
    lines = (out / "eval_report.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "class,intersection,union,iou"
    assert lines[-2].startswith("mean,,,") and lines[-1].startswith("binary,,,")
    assert (out / "summary.md").read_text(encoding="utf-8").startswith("# Evaluation")
    masks = sorted((out / "masks").iterdir())
    assert masks and read_pgm_labels(str(masks[0])).shape == (32, 32)


def test_eval_scale_flag_one_matches_default(workdir, trained):
    cfg, ckpt = trained
    assert main(["eval", "--config", cfg, "--checkpoint", ckpt, "--out", str(workdir / "plain")]) == EXIT_OK
    assert main(["eval", "--config", cfg, "--checkpoint", ckpt, "--out", str(workdir / "scaled"),
                 "--scales", "1.0", "--threads", "2"]) == EXIT_OK
    assert (workdir / "plain" / "eval_report.csv").read_bytes() == (workdir / "scaled" / "eval_report.csv").read_bytes()


def test_eval_on_base_split(workdir, trained):
    cfg, ckpt = trained
    out = workdir / "base"
    assert main(["eval", "--config", cfg, "--checkpoint", ckpt, "--out", str(out), "--split", "base"]) == EXIT_OK
    rows = (out / "eval_report.csv").read_text(encoding="utf-8").splitlines()[1:-2]
    assert rows and all(0 <= int(r.split(",")[0]) < 3 for r in rows)


def test_eval_rejects_corrupt_checkpoint(workdir, trained):
    cfg, ckpt = trained
    with open(ckpt, "r+b") as fh:
        fh.write(b"XXXXXXXX")
    assert main(["eval", "--config", cfg, "--checkpoint", ckpt, "--out", str(workdir / "eval")]) == EXIT_IO


def test_eval_rejects_mismatched_network(workdir, trained, caplog):
    _, ckpt = trained
    other = _config(workdir / "wide.txt", SMOKE.replace("embed.widths = 3,4,8", "embed.widths = 3,4,6"))
    assert main(["eval", "--config", other, "--checkpoint", ckpt, "--out", str(workdir / "eval")]) == EXIT_IO
    assert "(3, 3, 4, 8)" in caplog.text and "(3, 3, 4, 6)" in caplog.text


def test_ablate_writes_three_modes_and_sweep(workdir):
    cfg = _config(workdir / "run.txt")
    out = workdir / "ablate"
    assert main(["ablate", "--config", cfg, "--out", str(out), "--sweep-steps", "0..2"]) == EXIT_OK
    rows = (out / "ablation.csv").read_text(encoding="utf-8").splitlines()
    assert rows[0] == "mode,mean_iou,binary_iou,final_train_loss"
    assert [r.split(",")[0] for r in rows[1:]] == ["baseline", "support_init", "init_module"]
    sweep = (out / "sweep.csv").read_text(encoding="utf-8").splitlines()
    assert [r.split(",")[0] for r in sweep[1:]] == ["0", "1", "2"]
    for mode in ("baseline", "support_init", "init_module"):
        assert (out / f"checkpoint_{mode}.bin").read_bytes().startswith(MAGIC)
    assert "Init-mode ladder" in (out / "summary.md").read_text(encoding="utf-8")


def test_ablate_reports_final_prediction_loss(workdir):
    cfg = _config(workdir / "run.txt")
    out = workdir / "ablate"
    assert main(["ablate", "--config", cfg, "--out", str(out)]) == EXIT_OK
    reported = [float(r.split(",")[3]) for r in (out / "ablation.csv").read_text(encoding="utf-8").splitlines()[1:]]

    run_cfg = load_config(cfg)
    train_sampler, _ = samplers(run_cfg)
    for mode, value in zip(MODE_LADDER, reported):
        log = run_training(run_cfg, train_sampler, run_cfg.inner.with_overrides(init_mode=mode), 1).log
        expected = trailing_mean_loss(log, TRAILING_WINDOW, mode) if log else float("nan")
        np.testing.assert_equal(value, expected)


def _episode_dir(workdir, keep_query_mask):
    episode = gen_episode(all_shape_classes(), 1, 1, 32, seed=8)
    path = workdir / "episode"
    save_episode_dir(episode, str(path))
    if not keep_query_mask:
        (path / "query_0_mask.pgm").unlink()
    return episode, path


def test_infer_baseline_without_query_mask(workdir, trained, capsys):
    _, ckpt = trained
    episode, path = _episode_dir(workdir, keep_query_mask=False)
    code = main(["infer", "--checkpoint", ckpt, "--episode-dir", str(path),
                 "--inner-steps", "0", "--init-mode", "baseline"])
    assert code == EXIT_OK
    assert "mean-IoU" not in capsys.readouterr().out

    pred = read_pgm_labels(str(path / "predictions" / "pred_0.pgm"))
    params, gen = load_checkpoint(ckpt)
    _, expected = predict_episode(episode, params, gen, InnerConfig(steps=0, init_mode=InitMode.BASELINE))
    np.testing.assert_array_equal(pred, expected)
    losses = (path / "predictions" / "inner_loss.csv").read_text(encoding="utf-8").splitlines()
    assert losses[0] == "query,scale,step,loss"
    assert len(losses) == 2 and losses[1].startswith("0,1.0,0,")


def test_infer_loss_csv_has_steps_plus_one_rows(workdir, trained, capsys):
    _, ckpt = trained
    _, path = _episode_dir(workdir, keep_query_mask=True)
    out = workdir / "pred"
    assert main(["infer", "--checkpoint", ckpt, "--episode-dir", str(path), "--out", str(out),
                 "--inner-steps", "4"]) == EXIT_OK
    assert "mean-IoU" in capsys.readouterr().out
    rows = (out / "inner_loss.csv").read_text(encoding="utf-8").splitlines()[1:]
    assert [int(r.split(",")[2]) for r in rows] == [0, 1, 2, 3, 4]


def test_infer_requires_checkpoint_and_episode(workdir):
    assert main(["infer", "--episode-dir", str(workdir)]) == EXIT_CONFIG


def test_run_config_requires_seed():
    with pytest.raises(ValueError):
        RunConfig()
