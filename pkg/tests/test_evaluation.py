import json

import numpy as np
import pytest
import torch

from crossview.evaluation import (
    EvalReport,
    EvaluationError,
    consistency_check,
    evaluate,
    min_ade,
    min_fde,
    mode_coverage,
)
from crossview.model import CrossViewModel
from crossview.scene import generate_synthetic_scene


class TestMetrics:
    def test_min_ade_oracle(self):
        rng = np.random.default_rng(0)
        preds = rng.normal(size=(4, 6, 2))
        gt = rng.normal(size=(6, 2))
        expected = min(
            np.linalg.norm(p - gt, axis=1).mean() for p in preds
        )
        assert min_ade(preds, gt) == pytest.approx(expected, abs=1e-12)

    def test_min_fde_oracle(self):
        rng = np.random.default_rng(1)
        preds = rng.normal(size=(3, 5, 2))
        gt = rng.normal(size=(5, 2))
        expected = min(np.linalg.norm(p[-1] - gt[-1]) for p in preds)
        assert min_fde(preds, gt) == pytest.approx(expected, abs=1e-12)

    def test_valid_mask_changes_final_step(self):
        preds = np.zeros((1, 4, 2))
        gt = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [9.0, 0.0]])
        valid = np.array([True, True, True, False])
        assert min_fde(preds, gt, valid) == pytest.approx(2.0)
        assert min_ade(preds, gt, valid) == pytest.approx(1.0)

    def test_none_when_nothing_evaluable(self):
        gt = np.zeros((4, 2))
        assert min_ade(np.zeros((2, 4, 2)), gt, np.zeros(4, dtype=bool)) is None
        assert min_fde(np.zeros((0, 4, 2)), gt) is None

    def test_consistency_is_order_sensitive(self):
        assert consistency_check([1, 2, 3], [1, 2, 3])
        assert not consistency_check([1, 2, 3], [3, 2, 1])
        assert not consistency_check([1, 2], [1, 2, 3])

    def test_mode_coverage(self):
        goals = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
        endpoints = np.array([[1.0, 0.0], [10.5, 0.0]])
        assert mode_coverage(goals, endpoints, radius=2.0)
        assert not mode_coverage(goals, endpoints, radius=0.4)


class TestEvalReport:
    def test_rate_validation(self):
        with pytest.raises(EvaluationError):
            EvalReport(None, None, None, None, 0, 1.5, None, 1)
        with pytest.raises(EvaluationError):
            EvalReport(None, None, None, None, 0, 1.0, -0.1, 1)

    def test_to_dict_layout(self):
        rep = EvalReport(1.0, 2.0, 3.0, 4.0, 5, 0.9, 0.8, 10)
        d = rep.to_dict()
        assert d["bev"] == {"minade": 1.0, "minfde": 2.0}
        assert d["fpv"] == {"minade": 3.0, "minfde": 4.0, "skipped": 5}
        assert d["consistency_rate"] == 0.9
        assert d["n"] == 10

    def test_save(self, tmp_path):
        rep = EvalReport(1.0, 2.0, None, None, 0, 1.0, None, 3)
        path = tmp_path / "report.json"
        rep.save(path)
        assert json.loads(path.read_text())["fpv"]["minade"] is None


class TestEvaluate:
    def test_untrained_model_report(self, model, gen_config):
        samples = [generate_synthetic_scene(300 + i, gen_config) for i in range(5)]
        rep = evaluate(samples, model)
        assert rep.n == 5
        assert rep.consistency_rate == 1.0  # shared queries tie the views
        assert rep.bev_minade is not None and np.isfinite(rep.bev_minade)
        assert rep.mode_coverage is not None

    def test_empty_dataset_rejected(self, model):
        with pytest.raises(EvaluationError):
            evaluate([], model)
