import json

import numpy as np
import pytest
import torch

from crossview.model import ModelConfig
from crossview.scene import generate_synthetic_scene
from crossview.training import (
    TrainConfig,
    TrainingError,
    load_model,
    mask_generator,
    run_training,
    save_model,
    split_dataset,
    total_loss,
)

TINY = dict(
    candidate_radius=15.0,
    dense_radius=2.0,
    epochs=2,
    batch_size=4,
    val_fraction=0.25,
    val_every=1,
)


@pytest.fixture(scope="module")
def tiny_samples(gen_config):
    return [generate_synthetic_scene(200 + i, gen_config) for i in range(8)]


class TestTrainConfig:
    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(w2=-0.1)

    def test_beta_range(self):
        with pytest.raises(ValueError):
            TrainConfig(mask_probability=2.0)

    def test_lr_decay_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_decay=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lr_decay=1.5)
        assert TrainConfig(lr_decay=0.9).lr_decay == 0.9

    def test_dtype_validated(self):
        with pytest.raises(ValueError):
            TrainConfig(dtype="float16")
        assert TrainConfig(dtype="float32").torch_dtype is torch.float32

    def test_json_round_trip(self, tmp_path):
        cfg = TrainConfig(epochs=3, w_fpv=0.5)
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        loaded = TrainConfig.from_json_file(path, {"epochs": 7})
        assert loaded.epochs == 7
        assert loaded.w_fpv == 0.5

    def test_model_config_propagates(self):
        cfg = TrainConfig(coarse_threshold=0.2, use_cross_attention=False)
        mc = cfg.model_config(8, 12)
        assert mc.coarse_threshold == 0.2
        assert not mc.use_cross_attention
        assert (mc.t_obs, mc.t_pred) == (8, 12)


class TestTotalLoss:
    def test_direct_formula(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            vals = rng.random(6)
            w = rng.random(5)
            cfg = TrainConfig(w1=w[0], w2=w[1], w3=w[2], w_bev=w[3], w_fpv=w[4])
            comp = {
                "bev": {
                    "l1": torch.tensor(vals[0]),
                    "l2": torch.tensor(vals[1]),
                    "l3": torch.tensor(vals[2]),
                },
                "fpv": {
                    "l1": torch.tensor(vals[3]),
                    "l2": torch.tensor(vals[4]),
                    "l3": torch.tensor(vals[5]),
                },
            }
            expected = w[3] * (w[0] * vals[0] + w[1] * vals[1] + w[2] * vals[2]) + w[4] * (
                w[0] * vals[3] + w[1] * vals[4] + w[2] * vals[5]
            )
            assert abs(float(total_loss(comp, cfg)) - expected) < 1e-12

    def test_elementwise_over_batch(self):
        cfg = TrainConfig()
        comp = {
            "bev": {"l1": torch.tensor([1.0, 2.0]), "l2": torch.zeros(2), "l3": torch.zeros(2)},
            "fpv": {"l1": torch.zeros(2), "l2": torch.tensor([3.0, 4.0]), "l3": torch.zeros(2)},
        }
        out = total_loss(comp, cfg)
        assert torch.allclose(out, torch.tensor([4.0, 6.0]))


class TestDeterminismHelpers:
    def test_mask_generator_reproducible(self):
        a = torch.rand(5, generator=mask_generator(1, 2, 3))
        b = torch.rand(5, generator=mask_generator(1, 2, 3))
        c = torch.rand(5, generator=mask_generator(1, 2, 4))
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_split_disjoint_and_complete(self):
        train, val = split_dataset(20, 0.25, 0)
        assert len(val) == 5 and len(train) == 15
        assert sorted(np.concatenate([train, val]).tolist()) == list(range(20))

    def test_split_seed_dependent(self):
        a, _ = split_dataset(20, 0.25, 0)
        b, _ = split_dataset(20, 0.25, 1)
        assert not np.array_equal(a, b)


class TestRunTraining:
    def test_empty_dataset_rejected(self):
        with pytest.raises(TrainingError):
            run_training([], TrainConfig(epochs=1))

    def test_history_and_checkpoint(self, tiny_samples, tmp_path):
        cfg = TrainConfig(**TINY)
        ckpt = tmp_path / "model.json"
        hist_path = tmp_path / "history.json"
        model, history = run_training(
            tiny_samples, cfg, checkpoint_path=ckpt, history_path=hist_path
        )
        assert len(history) == cfg.epochs
        assert all(np.isfinite(h["train_loss"]) for h in history)
        assert "val_bev_minfde" in history[-1]
        loaded, extra = load_model(ckpt)
        assert extra["train_config"]["epochs"] == cfg.epochs
        for a, b in zip(model.state_dict().values(), loaded.state_dict().values()):
            assert torch.equal(a, b)
        assert json.loads(hist_path.read_text())[0]["epoch"] == 0

    def test_bit_identical_reruns(self, tiny_samples, tmp_path):
        cfg = TrainConfig(**TINY)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        run_training(tiny_samples, cfg, checkpoint_path=p1)
        run_training(tiny_samples, cfg, checkpoint_path=p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_seed_changes_result(self, tiny_samples, tmp_path):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        run_training(tiny_samples, TrainConfig(**TINY), checkpoint_path=p1)
        run_training(tiny_samples, TrainConfig(**{**TINY, "seed": 1}), checkpoint_path=p2)
        assert p1.read_bytes() != p2.read_bytes()

    def test_float32_training(self, tiny_samples, tmp_path):
        cfg = TrainConfig(**{**TINY, "dtype": "float32"})
        ckpt = tmp_path / "f32.json"
        model, history = run_training(tiny_samples, cfg, checkpoint_path=ckpt)
        assert model.dtype is torch.float32
        # Checkpoint parameters are stored as binary64 regardless.
        loaded, _ = load_model(ckpt)
        assert loaded.dtype is torch.float64

    def test_zero_epochs_returns_init(self, tiny_samples):
        cfg = TrainConfig(**{**TINY, "epochs": 0})
        model, history = run_training(tiny_samples, cfg)
        assert history == []

    def test_ablation_flags_run(self, tiny_samples):
        cfg = TrainConfig(
            **{
                **TINY,
                "epochs": 1,
                "use_shared_queries": False,
                "use_random_mask": False,
                "use_cross_attention": False,
            }
        )
        _, history = run_training(tiny_samples, cfg)
        assert len(history) == 1


class TestSaveLoad:
    def test_config_mismatch_detected(self, tiny_samples, tmp_path):
        cfg = TrainConfig(**{**TINY, "epochs": 0})
        model, _ = run_training(tiny_samples, cfg)
        path = tmp_path / "m.json"
        save_model(path, model, cfg)
        other = ModelConfig(t_obs=4, t_pred=3)
        with pytest.raises(TrainingError):
            load_model(path, override_cfg=other)

    def test_missing_config_rejected(self, tmp_path):
        from crossview.nn import save_checkpoint
        from crossview.model import CrossViewModel

        torch.manual_seed(0)
        m = CrossViewModel(ModelConfig())
        path = tmp_path / "m.json"
        save_checkpoint(path, m, extra={})
        with pytest.raises(TrainingError):
            load_model(path)
