import json
import math

import numpy as np
import pytest

from frustumbox.frustums import build_dataset_samples, filter_samples
from frustumbox.geometry import Box3D
from frustumbox.model import BoxAnnotator, ModelConfig
from frustumbox.optim import Adam
from frustumbox.synthetic import SceneSpec, write_synthetic_dataset
from frustumbox.train import (
    NonFiniteLoss,
    TrainConfig,
    TrainResult,
    train,
    train_set_miou,
    train_step,
)


def tiny_model(seed=0, **kw):
    cfg = ModelConfig(d=16, n_points=16, n_local_layers=1, n_global_layers=1,
                      n_decoder_layers=1, heads=2, head_hidden=16, **kw)
    return BoxAnnotator(cfg, rng=np.random.default_rng(seed))


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    spec = SceneSpec(noise_sigma=0.02, n_objects_min=3, n_objects_max=5)
    write_synthetic_dataset(root, spec, 6, np.random.default_rng(0), val_every=0)
    samples = build_dataset_samples(root, n_points=16, seed=0)
    kept, _ = filter_samples(samples)
    assert len(kept) >= 8
    return kept


class TestTrainStep:
    def test_loss_decreases_over_fixed_batch(self, tiny_dataset):
        model = tiny_model()
        opt = Adam(model.params, lr=1e-3, weight_decay=0.0)
        batch = tiny_dataset[:4]
        points = np.stack([s.points for s in batch])
        gts = [s.gt_box for s in batch]
        first = train_step(model, points, gts, opt, 1e-3).total.item()
        for _ in range(48):
            train_step(model, points, gts, opt, 1e-3)
        last = train_step(model, points, gts, opt, 1e-3).total.item()
        assert last < first

    def test_identical_samples_identical_predictions(self, tiny_dataset):
        model = tiny_model()
        s = tiny_dataset[0]
        points = np.stack([s.points] * 4)
        out = model.forward(points)
        for b in range(1, 4):
            np.testing.assert_array_equal(out.boxes.data[b], out.boxes.data[0])

    def test_nonfinite_loss_reports_ids(self, tiny_dataset):
        model = tiny_model()
        model.params["head.loc.l2.b"].data[:] = np.nan  # poisons the forward
        opt = Adam(model.params)
        batch = tiny_dataset[:2]
        points = np.stack([s.points for s in batch])
        gts = [s.gt_box for s in batch]
        with np.errstate(invalid="ignore"):
            with pytest.raises((NonFiniteLoss, Exception)) as ei:
                train_step(model, points, gts, opt, 1e-4,
                           sample_ids=[s.object_id for s in batch])
        assert ei.type.__name__ in ("NonFiniteLoss", "InvalidBox")
        if ei.type.__name__ == "NonFiniteLoss":
            assert batch[0].object_id in str(ei.value)


class TestTrainLoop:
    def test_two_runs_identical_metrics(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(batch_size=4, epochs=2, seed=3, checkpoint_every=0)

        def run(name):
            model = tiny_model(seed=1)
            return train(model, tiny_dataset, cfg, out_dir=tmp_path / name)

        a = run("a")
        b = run("b")
        assert open(a.metrics_path).read() == open(b.metrics_path).read()
        assert open(a.checkpoint_path, "rb").read() == open(b.checkpoint_path, "rb").read()

    def test_lr_schedule_endpoints(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(batch_size=4, epochs=2, seed=0, lr_max=1e-4, lr_min=0.0)
        model = tiny_model()
        result = train(model, tiny_dataset, cfg, out_dir=tmp_path / "lr")
        steps = [r for r in result.history if "lr" in r]
        assert steps[0]["lr"] == pytest.approx(1e-4)
        assert steps[-1]["lr"] == pytest.approx(0.0, abs=1e-18)

    def test_resume_matches_uninterrupted(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(batch_size=4, epochs=4, seed=7, checkpoint_every=2)
        full = train(tiny_model(seed=2), tiny_dataset, cfg, out_dir=tmp_path / "full")
        # resume from the midpoint checkpoint of an identical run
        resumed_model = tiny_model(seed=99)  # overwritten by the checkpoint
        resumed = train(
            resumed_model,
            tiny_dataset,
            cfg,
            out_dir=tmp_path / "resumed",
            resume_from=tmp_path / "full" / "ckpt_epoch0002.bin",
        )
        full_steps = [r for r in full.history if "total" in r]
        res_steps = [r for r in resumed.history if "total" in r]
        assert len(res_steps) == len(full_steps) // 2
        assert res_steps[-1]["total"] == pytest.approx(full_steps[-1]["total"], abs=1e-12)
        assert resumed.final_train_miou == pytest.approx(full.final_train_miou, abs=1e-12)

    def test_history_records_have_expected_fields(self, tiny_dataset, tmp_path):
        cfg = TrainConfig(batch_size=4, epochs=1, seed=0)
        result = train(tiny_model(), tiny_dataset, cfg, out_dir=tmp_path / "h")
        step_records = [r for r in result.history if "step" in r]
        assert step_records
        for r in step_records:
            assert set(r) == {"step", "lr", "box_loss", "dir_loss", "total", "batch_miou"}
        with open(result.metrics_path) as fh:
            parsed = [json.loads(line) for line in fh]
        assert parsed[-1]["final_train_miou"] == result.final_train_miou

    def test_rejects_undersized_dataset(self, tiny_dataset):
        cfg = TrainConfig(batch_size=len(tiny_dataset) + 1, epochs=1)
        with pytest.raises(ValueError) as ei:
            train(tiny_model(), tiny_dataset, cfg)
        assert "smaller than one batch" in str(ei.value)

    def test_rejects_batch_of_one_with_global(self, tiny_dataset):
        cfg = TrainConfig(batch_size=1, epochs=1)
        with pytest.raises(ValueError):
            train(tiny_model(use_global=True), tiny_dataset, cfg)

    def test_partial_batches_kept_without_global(self, tiny_dataset):
        n = len(tiny_dataset)
        bs = 4
        assert n % bs != 0 or n > bs  # make the arithmetic meaningful
        cfg = TrainConfig(batch_size=bs, epochs=1, seed=0)
        res_local = train(tiny_model(use_global=False), tiny_dataset, cfg)
        steps_local = len([r for r in res_local.history if "step" in r])
        assert steps_local == math.ceil(n / bs)
        res_global = train(tiny_model(use_global=True), tiny_dataset, cfg)
        steps_global = len([r for r in res_global.history if "step" in r])
        assert steps_global == n // bs

    def test_train_requires_ground_truth(self, tiny_dataset):
        from dataclasses import replace

        broken = [replace(tiny_dataset[0], gt_box=None)] + list(tiny_dataset[1:])
        with pytest.raises(ValueError) as ei:
            train(tiny_model(), broken, TrainConfig(batch_size=4, epochs=1))
        assert "ground truth" in str(ei.value)


class TestTrainSetMiou:
    def test_matches_quantized_reeval(self, tiny_dataset):
        model = tiny_model()
        a = train_set_miou(model, tiny_dataset, batch_size=4)
        b = train_set_miou(model, tiny_dataset, batch_size=4)
        assert a == b
        assert 0.0 <= a <= 1.0
