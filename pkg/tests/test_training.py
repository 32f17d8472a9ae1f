"""Training loop: determinism, outputs, abort paths, evaluation."""

import csv
import os
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from ghostprobe.checkpoint import load_checkpoint
from ghostprobe.data import load_samples
from ghostprobe.errors import ConfigError, NumericsError
from ghostprobe.model import init_model_params
from ghostprobe.optim import make_rng
from ghostprobe.pointnet import SALevelConfig
from ghostprobe.synth import generate_dataset
from ghostprobe.training import (
    CHECKPOINT_NAME,
    LOSS_CURVE_NAME,
    TrainConfig,
    evaluate_samples,
    train,
)

TINY_SIZES = dict(base_channels=4, depth=2, dim=16, max_points=64,
                  sa_levels=(SALevelConfig(n_out=16, k=4, mlp_widths=(8, 8)),
                             SALevelConfig(n_out=4, k=4, mlp_widths=(16, 16))))


def tiny_cfg(**kw):
    kw.setdefault("input_size", 32)
    kw.setdefault("epochs", 100)
    return TrainConfig(**kw)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = str(tmp_path_factory.mktemp("train_ds") / "ds")
    generate_dataset(path, 6, base_seed=42)
    return path


@pytest.fixture(scope="module")
def short_run(dataset, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run") / "out")
    cfg = tiny_cfg(max_steps=6, eval_every=1)
    return cfg, train(dataset, cfg, out, size_overrides=TINY_SIZES), out


class TestConfigValidation:
    @pytest.mark.parametrize("kw", [
        dict(split_fraction=0.0),
        dict(split_fraction=1.0),
        dict(rgb=False, ig=False, pcd=False),
        dict(lr=-0.1),
        dict(epochs=0),
        dict(batch_size=0),
        dict(input_size=8),
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_model_config_carries_flags_and_overrides(self):
        cfg = TrainConfig(rgb=True, ig=False, pcd=True)
        mcfg = cfg.model_config(TINY_SIZES)
        assert (mcfg.rgb, mcfg.ig, mcfg.pcd) == (True, False, True)
        assert mcfg.base_channels == 4
        assert len(mcfg.sa_levels) == 2


class TestShortRun:
    def test_step_accounting(self, short_run):
        _, result, _ = short_run
        assert result.steps == 6
        assert [s for s, _ in result.loss_curve] == list(range(1, 7))
        assert all(np.isfinite(l) and l > 0 for _, l in result.loss_curve)

    def test_outputs_on_disk(self, short_run):
        _, result, out = short_run
        assert result.checkpoint_path == os.path.join(out, CHECKPOINT_NAME)
        assert os.path.exists(result.checkpoint_path)
        with open(result.loss_curve_path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "loss"]
        assert [(int(s), float(l)) for s, l in rows[1:]] \
            == [(s, pytest.approx(l)) for s, l in result.loss_curve]

    def test_split_partitions_dataset(self, short_run, dataset):
        _, result, _ = short_run
        from ghostprobe.formats import read_index
        assert sorted(result.train_ids + result.val_ids) == sorted(read_index(dataset))
        assert result.train_ids

    def test_f1_history_recorded(self, short_run):
        _, result, _ = short_run
        assert result.f1_history
        step, f1, train_f1 = result.f1_history[0]
        assert 0 <= f1 <= 1
        assert train_f1 is None  # only measured when early stop is armed
        assert not result.stopped_early

    def test_refuses_nonempty_out_dir(self, short_run, dataset):
        cfg, _, out = short_run
        with pytest.raises(ConfigError):
            train(dataset, cfg, out, size_overrides=TINY_SIZES)


class TestDeterminism:
    def test_same_seed_bit_identical(self, dataset, tmp_path):
        cfg = tiny_cfg(max_steps=5, seed=3)
        a = train(dataset, cfg, str(tmp_path / "a"), size_overrides=TINY_SIZES)
        b = train(dataset, cfg, str(tmp_path / "b"), size_overrides=TINY_SIZES)
        assert a.loss_curve == b.loss_curve
        assert a.f1_history == b.f1_history
        ck_a = load_checkpoint(a.checkpoint_path)
        ck_b = load_checkpoint(b.checkpoint_path)
        assert set(ck_a) == set(ck_b)
        for k in ck_a:
            assert_array_equal(ck_a[k], ck_b[k])

    def test_seed_changes_trajectory(self, dataset, tmp_path):
        a = train(dataset, tiny_cfg(max_steps=3, seed=1),
                  str(tmp_path / "a"), size_overrides=TINY_SIZES)
        b = train(dataset, tiny_cfg(max_steps=3, seed=2),
                  str(tmp_path / "b"), size_overrides=TINY_SIZES)
        assert a.loss_curve != b.loss_curve


class TestZeroLr:
    def test_checkpoint_equals_init(self, dataset, tmp_path):
        cfg = tiny_cfg(lr=0.0, max_steps=3, seed=5)
        result = train(dataset, cfg, str(tmp_path / "out"), size_overrides=TINY_SIZES)
        fresh = init_model_params(make_rng(5), cfg.model_config(TINY_SIZES))
        saved = load_checkpoint(result.checkpoint_path)
        assert set(saved) == set(fresh)
        for k in saved:
            assert_array_equal(saved[k], fresh[k].data)


class TestNanAbort:
    def test_exploding_lr_raises(self, dataset, tmp_path):
        cfg = tiny_cfg(lr=1e12, max_steps=4, seed=0)
        with np.errstate(all="ignore"), pytest.raises(NumericsError):
            train(dataset, cfg, str(tmp_path / "out"), size_overrides=TINY_SIZES)


class TestLossTrend:
    def test_windowed_means_decrease(self, dataset, tmp_path):
        cfg = tiny_cfg(lr=1e-3, max_steps=150, seed=0)
        result = train(dataset, cfg, str(tmp_path / "out"), size_overrides=TINY_SIZES)
        losses = [l for _, l in result.loss_curve]
        means = [np.mean(losses[i:i + 50]) for i in range(0, 150, 50)]
        # local noise allowed, windows must trend down
        assert means[1] <= means[0] * 1.05
        assert means[2] <= means[1] * 1.05
        assert means[2] < means[0]


class TestEvaluate:
    def test_jobs_do_not_change_the_report(self, dataset):
        cfg = tiny_cfg(seed=9)
        mcfg = cfg.model_config(TINY_SIZES)
        params = init_model_params(make_rng(9), mcfg)
        samples = load_samples(dataset, mcfg, cfg.input_size)
        serial, per_serial = evaluate_samples(samples, mcfg, params, jobs=1)
        threaded, per_threaded = evaluate_samples(samples, mcfg, params, jobs=3)
        assert (serial.tp, serial.fp, serial.fn) == (threaded.tp, threaded.fp, threaded.fn)
        assert [sid for sid, _ in per_serial] == [sid for sid, _ in per_threaded]
        for (_, a), (_, b) in zip(per_serial, per_threaded):
            assert (a.tp, a.fp, a.fn) == (b.tp, b.fp, b.fn)

    def test_counts_sum_over_samples(self, dataset):
        cfg = tiny_cfg(seed=9)
        mcfg = cfg.model_config(TINY_SIZES)
        params = init_model_params(make_rng(9), mcfg)
        samples = load_samples(dataset, mcfg, cfg.input_size)
        total, per_sample = evaluate_samples(samples, mcfg, params)
        assert total.tp == sum(r.tp for _, r in per_sample)
        assert total.fp == sum(r.fp for _, r in per_sample)
        assert total.fn == sum(r.fn for _, r in per_sample)
