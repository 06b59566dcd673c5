"""
评估服务单元测试
"""
import numpy as np
import pytest
import torch

from nobox.core.exceptions import EmptyEvaluationError, MechanismError
from nobox.data.loader import sample_prototype_bank
from nobox.models.autoencoder.substitute import build_model
from nobox.models.schemas import EvalReport
from nobox.models.victims.zoo import EmbeddingVerifier, TorchVictim, VictimSpec, build_victim
from nobox.services.evaluation import (
    accuracy_on,
    evaluate_victims,
    prototype_classify,
    prototype_classify_multi,
    roc_curve,
    roc_from_scores,
)

from tests.conftest import TINY_SHAPE, make_aux


class ConstantVictim:
    """总是预测同一类别的桩受害者"""

    num_classes = 2
    metadata = {}

    def __init__(self, label: int, name: str = "const"):
        self.label = label
        self.name = name

    def predict(self, batch):
        return torch.full((batch.shape[0],), self.label, dtype=torch.long)


class TestPrototypeClassifier:
    """原型距离分类器测试"""

    def test_single_decoder_matches_multi(self, tiny_spec):
        """测试 K=1 时单解码器与多解码器分类结果一致"""
        model = build_model(tiny_spec)
        aux = make_aux()
        bank = sample_prototype_bank(aux, K=1, seed=0)
        x = torch.rand(1000, *TINY_SHAPE, generator=torch.Generator().manual_seed(0))
        assert torch.equal(prototype_classify(model, x, bank), prototype_classify_multi(model, x, bank))

    def test_single_image_returns_int(self, tiny_spec):
        """测试单张输入返回整数标签"""
        model = build_model(tiny_spec)
        bank = sample_prototype_bank(make_aux(), K=1, seed=0)
        assert prototype_classify(model, torch.rand(TINY_SHAPE), bank) in (0, 1)

    def test_multi_requires_matching_bank(self, tiny_spec):
        """测试原型库大小与解码器数不一致"""
        model = build_model(tiny_spec.model_copy(update={"num_decoders": 2}))
        bank = sample_prototype_bank(make_aux(), K=1, seed=0)
        with pytest.raises(MechanismError):
            prototype_classify_multi(model, torch.rand(TINY_SHAPE), bank)
        with pytest.raises(MechanismError):
            prototype_classify(model, torch.rand(TINY_SHAPE), bank)


class TestVictimAccuracy:
    """受害者准确率测试"""

    def test_accuracy_counts(self):
        """测试准确率为正确数 / 总数"""
        examples = [(torch.rand(TINY_SHAPE), y) for y in (0, 0, 1, 0)]
        assert accuracy_on(ConstantVictim(0), examples) == pytest.approx(0.75)

    def test_report_per_victim(self):
        """测试报告逐受害者记录并计算平均值"""
        examples = [(torch.rand(TINY_SHAPE), y) for y in (0, 1)]
        report = evaluate_victims([ConstantVictim(0, "a"), ConstantVictim(1, "b")], examples, method="m")
        assert report.accuracy == {"a": 0.5, "b": 0.5}
        assert report.total == {"a": 2, "b": 2}
        assert report.average == pytest.approx(0.5)

    def test_empty(self):
        """测试空评估集"""
        with pytest.raises(EmptyEvaluationError):
            accuracy_on(ConstantVictim(0), [])

    def test_report_consistency_validated(self):
        """测试准确率与计数不一致的报告无法反序列化"""
        with pytest.raises(ValueError):
            EvalReport(accuracy={"a": 0.9}, correct={"a": 1}, total={"a": 2})

    def test_torch_victim_batch(self):
        """测试受害者网络的批量预测"""
        net = build_victim(VictimSpec(arch="deep_cnn", input_shape=TINY_SHAPE))
        victim = TorchVictim(net)
        preds = victim.predict(torch.rand(3, *TINY_SHAPE))
        assert preds.shape == (3,)
        assert victim.metadata["input_shape"] == list(TINY_SHAPE)


class TestRoc:
    """ROC 曲线测试"""

    def test_auc_equals_mann_whitney(self):
        """测试 AUC 等于 Mann-Whitney U / (n_g · n_i)"""
        rng = np.random.default_rng(0)
        for _ in range(100):
            genuine = rng.normal(1.0, 1.0, size=rng.integers(2, 30))
            impostor = rng.normal(0.0, 1.0, size=rng.integers(2, 30))
            curve = roc_from_scores(genuine, impostor)
            diff = genuine[:, None] - impostor[None, :]
            u = float((diff > 0).sum() + 0.5 * (diff == 0).sum())
            assert curve.auc == pytest.approx(u / (len(genuine) * len(impostor)), abs=1e-9)

    def test_monotone_and_endpoints(self):
        """测试阈值降序，TPR / FPR 单调不减并从 0 走到 1"""
        curve = roc_from_scores([0.9, 0.8, 0.4], [0.5, 0.3, 0.1, 0.0])
        assert curve.thresholds == sorted(curve.thresholds, reverse=True)
        assert curve.tpr == sorted(curve.tpr)
        assert curve.fpr == sorted(curve.fpr)
        assert (curve.tpr[0], curve.fpr[0]) == (0.0, 0.0)
        assert (curve.tpr[-1], curve.fpr[-1]) == (1.0, 1.0)

    def test_ties_give_half(self):
        """测试所有分数相同时 AUC 为 0.5"""
        assert roc_from_scores([0.3] * 5, [0.3] * 7).auc == pytest.approx(0.5)

    def test_empty_pairs(self):
        """测试样本对为空"""
        with pytest.raises(EmptyEvaluationError):
            roc_from_scores([], [0.1])

    def test_verifier_curve(self):
        """测试基于受害者嵌入的验证 ROC"""
        net = build_victim(VictimSpec(arch="small_cnn", input_shape=TINY_SHAPE))
        verifier = EmbeddingVerifier(TorchVictim(net))
        a, b = torch.rand(TINY_SHAPE), torch.rand(TINY_SHAPE)
        curve = roc_curve(verifier, [(a, a)], [(a, b)])
        assert 0.0 <= curve.auc <= 1.0
        assert len(curve.tpr) == len(curve.fpr) == len(curve.thresholds)
