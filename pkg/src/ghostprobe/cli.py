"""Command-line surface for the whole pipeline.

stdout carries exactly one machine-readable JSON document per invocation;
all human-facing logs go to stderr.  Exit codes: 0 success, 1 runtime
failure (numerics, I/O), 2 usage or configuration error.
"""

import json
import logging
import os
import sys

import click

from .config import RunConfig, SceneDefaults, config_hash, load_config
from .data import load_samples, prepare_sample, split_ids
from .detect import postprocess
from .errors import ConfigError, GhostProbeError, SceneSpecError
from .formats import (ANNOTATIONS_NAME, read_annotations, read_index,
                      read_sample_files)
from .model import init_model_params
from .optim import make_rng
from .training import TrainConfig, evaluate_samples, predict_probs, run_ablation, train

log = logging.getLogger(__name__)

SEED_ENV = "GHOSTPROBE_SEED"


def _emit(doc):
    json.dump(doc, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _load_run_config(path):
    if path is None:
        return RunConfig(train=TrainConfig(), model_sizes={},
                         scene=SceneDefaults(), paths={})
    return load_config(path)


def _resolve_seed(flag_value, cfg):
    """Explicit --seed wins, then the environment, then the config file."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}")
    return cfg.train.seed


def _run(body):
    try:
        body()
    except click.ClickException:
        raise
    except (ConfigError, SceneSpecError) as exc:
        log.error("%s", exc)
        sys.exit(2)
    except (GhostProbeError, OSError) as exc:
        log.error("%s", exc)
        sys.exit(1)


def _load_params(cfg, checkpoint):
    from .checkpoint import load_checkpoint, restore_into

    mcfg = cfg.model_config()
    params = init_model_params(make_rng(cfg.train.seed), mcfg)
    restore_into(params, load_checkpoint(checkpoint))
    return mcfg, params


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logs on stderr.")
def main(verbose):
    """Ghost-probe zone prediction: synthesis, training, evaluation."""
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--out", required=True, type=click.Path(), help="Dataset directory.")
@click.option("--count", required=True, type=int, help="Number of samples.")
@click.option("--seed", type=int, default=None, help="Base seed.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--force", is_flag=True, help="Replace an existing dataset.")
def synth(out, count, seed, config_path, force):
    """Generate a synthetic depth+RGB dataset with zone annotations."""
    def body():
        from .synth import generate_dataset

        cfg = _load_run_config(config_path)
        base_seed = _resolve_seed(seed, cfg)
        sc = cfg.scene
        ids = generate_dataset(out, count, base_seed, size=sc.size, near=sc.near,
                               far=sc.far, noise=sc.noise,
                               max_occluders=sc.max_occluders, force=force)
        _emit({"dataset": out, "count": len(ids), "seed": base_seed,
               "config_hash": config_hash(cfg), "sample_ids": ids})
    _run(body)


@main.command(name="train")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--force", is_flag=True, help="Replace an existing run directory.")
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Parallel evaluation workers.")
def train_cmd(data, out, config_path, seed, force, jobs):
    """Train on a dataset; writes checkpoint, loss curve, and figures."""
    def body():
        import dataclasses

        from .figures import render_loss_curve

        cfg = _load_run_config(config_path)
        cfg.train = dataclasses.replace(cfg.train, seed=_resolve_seed(seed, cfg))
        result = train(data, cfg.train, out, force=force,
                       size_overrides=cfg.model_size_fields())
        fig_path = render_loss_curve(result.loss_curve,
                                     os.path.join(out, "loss.png"),
                                     result.f1_history)
        _emit({"dataset": data, "config_hash": config_hash(cfg),
               "steps": result.steps, "best_f1": result.best_f1,
               "best_step": result.best_step,
               "stopped_early": result.stopped_early,
               "train_ids": result.train_ids, "val_ids": result.val_ids,
               "checkpoint": result.checkpoint_path,
               "loss_curve": result.loss_curve_path, "loss_figure": fig_path})
    _run(body)


def _metrics_doc(data, cfg, total, per_sample):
    doc = {"dataset": data, "config_hash": config_hash(cfg)}
    doc.update(total.as_dict())
    doc["per_sample"] = [dict(sample_id=sid, **rep.as_dict())
                         for sid, rep in per_sample]
    return doc


@main.command(name="eval")
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--split", type=click.Choice(["train", "val", "all"]), default="val",
              show_default=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--report", "report_dir", type=click.Path(), default=None,
              help="Directory for metrics.json, overlays, and charts.")
@click.option("--force", is_flag=True)
def eval_cmd(data, checkpoint, config_path, split, jobs, report_dir, force):
    """Evaluate a checkpoint; metrics JSON on stdout."""
    def body():
        cfg = _load_run_config(config_path)
        mcfg, params = _load_params(cfg, checkpoint)
        ids = read_index(data)
        if split != "all":
            train_ids, val_ids = split_ids(ids, cfg.train.split_fraction)
            ids = train_ids if split == "train" else val_ids
        if not ids:
            raise ConfigError(f"{data}: no samples in split '{split}'")
        samples = load_samples(data, mcfg, cfg.train.input_size, ids)
        total, per_sample = evaluate_samples(samples, mcfg, params, jobs=jobs)
        doc = _metrics_doc(data, cfg, total, per_sample)
        if report_dir is not None:
            _write_report(report_dir, doc, samples, mcfg, params, force)
        _emit(doc)
    _run(body)


def _write_report(report_dir, doc, samples, mcfg, params, force):
    """metrics.json plus one overlay per sample and a per-sample F1 chart."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from . import tensor as T
    from .figures import render_overlay
    from .training import _prepare_out_dir

    _prepare_out_dir(report_dir, force)
    with open(os.path.join(report_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    overlay_dir = os.path.join(report_dir, "overlays")
    os.makedirs(overlay_dir, exist_ok=True)
    with T.no_grad():
        probs = predict_probs(samples, mcfg, params)
    for s, prob in zip(samples, probs):
        rgb = s.channels[:3].transpose(1, 2, 0) if s.channels.shape[0] >= 3 else None
        render_overlay(rgb, prob[0], s.annotation.boxes, postprocess(prob),
                       os.path.join(overlay_dir, f"{s.sample_id}.ppm"))
    rows = doc["per_sample"]
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(rows)), 3), dpi=120)
    ax.bar(range(len(rows)), [r["f1"] for r in rows], color="tab:blue")
    ax.set_xticks(range(len(rows)), [r["sample_id"] for r in rows],
                  rotation=60, ha="right", fontsize=6)
    ax.set_ylabel("F1")
    ax.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(os.path.join(report_dir, "per_sample_f1.png"))
    plt.close(fig)


@main.command()
@click.option("--input", "sample_path", required=True,
              type=click.Path(exists=True, file_okay=False),
              help="One sample directory inside a dataset.")
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--overlay", "overlay_path", required=True, type=click.Path(),
              help="Output PPM; a JSON sidecar lands next to it.")
def predict(sample_path, checkpoint, config_path, overlay_path):
    """Run one sample through the model and render the detections."""
    def body():
        from . import tensor as T
        from .figures import render_overlay

        cfg = _load_run_config(config_path)
        mcfg, params = _load_params(cfg, checkpoint)
        dataset_dir = os.path.dirname(os.path.abspath(sample_path.rstrip("/")))
        sid = os.path.basename(os.path.abspath(sample_path.rstrip("/")))
        frame = read_sample_files(dataset_dir, sid)
        ann_path = os.path.join(dataset_dir, ANNOTATIONS_NAME)
        boxes = read_annotations(ann_path).get(sid, []) if os.path.exists(ann_path) else []
        sample = prepare_sample(frame, boxes, mcfg, cfg.train.input_size)
        with T.no_grad():
            prob = predict_probs([sample], mcfg, params)[0]
        dets = postprocess(prob)
        rgb = sample.channels[:3].transpose(1, 2, 0) if sample.channels.shape[0] >= 3 else None
        render_overlay(rgb, prob[0], sample.annotation.boxes, dets, overlay_path)
        doc = {"sample_id": sid, "config_hash": config_hash(cfg),
               "overlay": overlay_path,
               "detections": [dict(box=list(d.box), score=d.score) for d in dets]}
        with open(overlay_path + ".json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
        _emit(doc)
    _run(body)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
def gradcheck(config_path, seed):
    """Finite-difference audit of every op and the composed model."""
    def body():
        from .gradcheck import run_gradcheck_suite

        cfg = _load_run_config(config_path)
        rows, ok = run_gradcheck_suite(seed=_resolve_seed(seed, cfg))
        _emit({"config_hash": config_hash(cfg), "pass": ok, "rows": rows})
        if not ok:
            sys.exit(1)
    _run(body)


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True)
@click.option("--jobs", type=int, default=1, show_default=True)
def ablate(data, out, config_path, seed, force, jobs):
    """Train the four input configurations and compare validation scores."""
    def body():
        import dataclasses

        from .figures import render_ablation_chart

        cfg = _load_run_config(config_path)
        cfg.train = dataclasses.replace(cfg.train, seed=_resolve_seed(seed, cfg))
        rows = run_ablation(data, cfg.train, out, force=force, jobs=jobs,
                            size_overrides=cfg.model_size_fields())
        chart = render_ablation_chart(rows, os.path.join(out, "ablation.png"))
        _emit({"dataset": data, "config_hash": config_hash(cfg), "chart": chart,
               "rows": [dict(mode=name, flags=flags, **rep.as_dict())
                        for name, flags, rep in rows]})
    _run(body)


if __name__ == "__main__":
    main()
