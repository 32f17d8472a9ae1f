"""Training loop, evaluation, and the four-way ablation driver.

Training is deterministic: the seed fixes the parameter init, the per-epoch
shuffles, and the point subsampling, so two runs with the same seed produce
bit-identical loss curves.  The per-pixel binary cross-entropy target is
each sample's rasterized box mask.  Validation F1 picks the checkpoint;
a NaN anywhere in the forward pass aborts with the offending op's name.
"""

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import load_samples, make_batch, split_ids
from .detect import match_and_score, postprocess, report_from_counts
from .errors import ConfigError, NumericsError
from .formats import read_index
from .model import ModelConfig, init_model_params, model_forward
from .optim import Adam, make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "best.ckpt"
LOSS_CURVE_NAME = "loss.csv"


@dataclass
class TrainConfig:
    """Optimization settings and the input-ablation flags."""

    lr: float = 0.0001
    epochs: int = 300
    batch_size: int = 4
    input_size: int = 64
    split_fraction: float = 0.8
    seed: int = 0
    rgb: bool = True
    ig: bool = True
    pcd: bool = True
    max_steps: int = 0          # 0 = epochs alone bound the run
    eval_every: int = 1         # epochs between validation F1 checks
    stop_at_train_f1: float = 0.0  # 0 = never stop early

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError(f"split fraction must be in (0,1), got {self.split_fraction}")
        if not (self.rgb or self.ig or self.pcd):
            raise ConfigError("at least one of rgb/ig/pcd must be enabled")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be nonnegative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be at least 1")
        if self.input_size < 16:
            raise ConfigError(f"input size {self.input_size} too small")

    def model_config(self, size_overrides=None):
        """ModelConfig from the input flags plus optional non-flag fields."""
        return ModelConfig(rgb=self.rgb, ig=self.ig, pcd=self.pcd,
                           **(size_overrides or {}))


@dataclass
class TrainResult:
    """What a training run produced and where it put it."""

    loss_curve: list
    best_f1: float
    best_step: int
    steps: int
    checkpoint_path: str
    loss_curve_path: str
    train_ids: list
    val_ids: list
    stopped_early: bool = False
    f1_history: list = field(default_factory=list)  # (step, gauge f1, train f1 | None)


def predict_probs(samples, mcfg, params, batch_size=4):
    """Probability maps [1,H,W] for each sample, forwarded in batches."""
    probs = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        images, cloud, _ = make_batch(chunk)
        prob = model_forward(images, cloud, mcfg, params)
        probs.extend(prob.data[i] for i in range(len(chunk)))
    return probs


def evaluate_samples(samples, mcfg, params, jobs=1, batch_size=4):
    """Aggregate report plus per-sample reports, in sample order.

    Each batch's forward pass is independent, so batches may run on a
    thread pool; the reduction is a plain integer sum, identical in any
    order.
    """
    def chunk_reports(chunk):
        return [match_and_score(postprocess(prob), s.annotation)
                for prob, s in zip(predict_probs(chunk, mcfg, params, batch_size), chunk)]

    chunks = [samples[lo:lo + batch_size] for lo in range(0, len(samples), batch_size)]
    with T.no_grad():
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                reports = [r for rs in pool.map(chunk_reports, chunks) for r in rs]
        else:
            reports = [r for chunk in chunks for r in chunk_reports(chunk)]
    total = report_from_counts(sum(r.tp for r in reports),
                              sum(r.fp for r in reports),
                              sum(r.fn for r in reports))
    return total, list(zip((s.sample_id for s in samples), reports))


def _prepare_out_dir(out_dir, force):
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ConfigError(f"{out_dir} is not empty; pass force to overwrite")
    os.makedirs(out_dir, exist_ok=True)


def train(dataset_dir, cfg, out_dir, force=False, size_overrides=None):
    """Fit the model on the dataset's train split; returns a TrainResult."""
    _prepare_out_dir(out_dir, force)
    mcfg = cfg.model_config(size_overrides)
    ids = read_index(dataset_dir)
    train_ids, val_ids = split_ids(ids, cfg.split_fraction)
    if not train_ids:
        raise ConfigError(f"{dataset_dir}: hash split left no training samples")
    if not val_ids:
        log.warning("hash split left no validation samples; "
                    "checkpointing on training F1 instead")
    train_samples = load_samples(dataset_dir, mcfg, cfg.input_size, train_ids)
    val_samples = load_samples(dataset_dir, mcfg, cfg.input_size, val_ids)

    rng = make_rng(cfg.seed)
    params = init_model_params(rng, mcfg)
    opt = Adam(params, lr=cfg.lr)
    ckpt_path = os.path.join(out_dir, CHECKPOINT_NAME)
    curve_path = os.path.join(out_dir, LOSS_CURVE_NAME)

    loss_curve = []
    f1_history = []
    best_f1, best_step = -1.0, 0
    step = 0
    stopped = False
    T.set_nan_guard(True)
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_samples))
            for lo in range(0, len(order), cfg.batch_size):
                batch = [train_samples[i] for i in order[lo:lo + cfg.batch_size]]
                images, cloud, targets = make_batch(batch)
                prob = model_forward(images, cloud, mcfg, params)
                loss = T.bce_loss(prob, Tensor(targets))
                opt.zero_grad()
                T.backward(loss)
                opt.step()
                step += 1
                loss_curve.append((step, loss.item()))
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1 \
                    or (cfg.max_steps and step >= cfg.max_steps):
                gauge = val_samples if val_samples else train_samples
                f1 = evaluate_samples(gauge, mcfg, params)[0].f1
                if f1 > best_f1:
                    best_f1, best_step = f1, step
                    save_checkpoint(ckpt_path, params)
                train_f1 = None
                if cfg.stop_at_train_f1 > 0:
                    train_f1 = evaluate_samples(train_samples, mcfg, params)[0].f1
                    if train_f1 >= cfg.stop_at_train_f1:
                        stopped = True
                f1_history.append((step, f1, train_f1))
            if stopped or (cfg.max_steps and step >= cfg.max_steps):
                break
    except NumericsError as exc:
        log.error("aborting: op %r produced the first non-finite value "
                  "at step %d", exc.op_name, step + 1)
        raise
    finally:
        T.set_nan_guard(False)

    if best_f1 < 0:  # no eval point reached; keep the final parameters
        best_f1, best_step = 0.0, step
        save_checkpoint(ckpt_path, params)
    with open(curve_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        writer.writerows(loss_curve)
    return TrainResult(loss_curve=loss_curve, best_f1=best_f1, best_step=best_step,
                       steps=step, checkpoint_path=ckpt_path,
                       loss_curve_path=curve_path, train_ids=train_ids,
                       val_ids=val_ids, stopped_early=stopped, f1_history=f1_history)


ABLATION_MODES = (
    ("pcd_only", dict(rgb=False, ig=False, pcd=True)),
    ("rgb_ig", dict(rgb=True, ig=True, pcd=False)),
    ("rgb_pcd", dict(rgb=True, ig=False, pcd=True)),
    ("full", dict(rgb=True, ig=True, pcd=True)),
)


def run_ablation(dataset_dir, base_cfg, out_dir, force=False, jobs=1,
                 size_overrides=None):
    """Train and score the four input configurations on the same split.

    Returns a list of (mode name, flags, validation EvalReport) triples in
    ABLATION_MODES order.
    """
    from .checkpoint import load_checkpoint, restore_into

    _prepare_out_dir(out_dir, force)
    rows = []
    for name, flags in ABLATION_MODES:
        cfg = replace(base_cfg, **flags)
        mode_dir = os.path.join(out_dir, name)
        result = train(dataset_dir, cfg, mode_dir, force=force,
                       size_overrides=size_overrides)
        mcfg = cfg.model_config(size_overrides)
        params = init_model_params(make_rng(cfg.seed), mcfg)
        restore_into(params, load_checkpoint(result.checkpoint_path))
        _, val_ids = split_ids(read_index(dataset_dir), cfg.split_fraction)
        val_samples = load_samples(dataset_dir, mcfg, cfg.input_size, val_ids)
        report = evaluate_samples(val_samples, mcfg, params, jobs=jobs)[0]
        log.info("ablation %s: val F1 %.4f", name, report.f1)
        rows.append((name, flags, report))
    return rows
