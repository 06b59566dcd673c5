"""
对抗样本生成单元测试
"""
import math

import pytest
import torch
import torch.nn as nn

from nobox.core.exceptions import FeasibilityError, GuideError, ZeroNormEmbeddingError
from nobox.core.reproducibility import make_generator
from nobox.data.loader import sample_prototype_bank
from nobox.models.autoencoder.substitute import build_model
from nobox.models.classifier.naive import ClassifierSpec, build_classifier
from nobox.models.schemas import AttackConfig, Budget, GuideSet, LossKind, Mechanism, TrainConfig
from nobox.services.attack import (
    AttackTrace,
    adversarial_loss,
    adversarial_loss_cosine,
    assert_feasible,
    build_guides,
    craft,
    is_feasible,
    multi_decoder_loss,
    on_grid,
    project,
    quantize_perturbation,
    run_baseline,
    run_ila,
    working_copy,
)
from nobox.services.training import train_substitute

from tests.conftest import TINY_SHAPE, make_aux


class LinearStub(nn.Module):
    """编码、重建、嵌入都是恒等映射的桩模型"""

    num_decoders = 1

    def __init__(self):
        super().__init__()
        self.dummy = nn.Parameter(torch.zeros(()))

    def encode(self, x):
        return x

    def reconstruct(self, x, k=0):
        return x

    def embedding(self, x, k=0):
        return x.flatten()


def _x(seed=0, dtype=torch.float64):
    return torch.rand(TINY_SHAPE, generator=make_generator(seed), dtype=dtype)


def _config(**kw):
    budget = Budget(**{k: kw.pop(k) for k in ("norm", "epsilon", "step_size") if k in kw})
    return AttackConfig(budget=budget, **kw)


class TestAdversarialLoss:
    """对抗损失闭式值测试"""

    def test_equidistant_is_ln2(self):
        """测试正负原型与重建等距时损失为 ln 2"""
        x = _x()
        guides = GuideSet(positive=x + 0.1, negatives=[x - 0.1])
        assert float(adversarial_loss(LinearStub(), x, guides)) == pytest.approx(math.log(2), rel=1e-10)

    def test_positive_at_reconstruction(self):
        """测试重建等于正原型时损失为 ln(1 + exp(−λd²))"""
        x = _x()
        neg = _x(1)
        d2 = float((x - neg).pow(2).sum())
        for lam in (0.01, 0.1, 1.0):
            loss = adversarial_loss(LinearStub(), x, GuideSet(positive=x, negatives=[neg]), lam)
            assert float(loss) == pytest.approx(math.log1p(math.exp(-lam * d2)), rel=1e-9)

    def test_small_lambda_tends_to_ln_m_plus_1(self):
        """测试 λ→0 时损失趋于 ln(m + 1)"""
        x = _x()
        negatives = [_x(s) for s in range(1, 5)]
        loss = adversarial_loss(LinearStub(), x, GuideSet(positive=_x(9), negatives=negatives), 1e-9)
        assert float(loss) == pytest.approx(math.log(5), rel=1e-6)

    def test_empty_negatives(self):
        """测试负原型为空"""
        x = _x()
        with pytest.raises(GuideError):
            adversarial_loss(LinearStub(), x, GuideSet(positive=x, negatives=[]))


class TestCosineLoss:
    """余弦损失测试"""

    def _orthogonal(self):
        a = torch.zeros(TINY_SHAPE, dtype=torch.float64)
        b = torch.zeros(TINY_SHAPE, dtype=torch.float64)
        a[0, 0, 0] = 1.0
        b[1, 0, 0] = 1.0
        return a, b

    def test_orthogonal_negative(self):
        """测试正原型同向、负原型正交时损失为 ln(1 + e^−λ)"""
        a, b = self._orthogonal()
        for lam in (0.5, 2.0):
            loss = adversarial_loss_cosine(LinearStub(), a, GuideSet(positive=a * 3, negatives=[b]), lam)
            assert float(loss) == pytest.approx(math.log1p(math.exp(-lam)), rel=1e-10)

    def test_small_lambda(self):
        """测试 λ→0 时余弦损失同样趋于 ln(m + 1)"""
        a, b = self._orthogonal()
        loss = adversarial_loss_cosine(LinearStub(), a, GuideSet(positive=a, negatives=[b, a, b]), 1e-9)
        assert float(loss) == pytest.approx(math.log(4), rel=1e-6)

    def test_zero_embedding(self):
        """测试零嵌入报错"""
        a, b = self._orthogonal()
        with pytest.raises(ZeroNormEmbeddingError):
            adversarial_loss_cosine(LinearStub(), torch.zeros_like(a), GuideSet(positive=a, negatives=[b]))
        with pytest.raises(ZeroNormEmbeddingError):
            adversarial_loss_cosine(LinearStub(), a, GuideSet(positive=a, negatives=[torch.zeros_like(b)]))

    def test_multi_decoder_mean(self, tiny_spec):
        """测试多解码器损失为各解码器损失的平均"""
        model = build_model(tiny_spec.model_copy(update={"num_decoders": 2})).double()
        x = _x()
        guides = GuideSet(positive=_x(1), negatives=[_x(2)], decoder_positives=[_x(1), _x(3)])
        for kind, fn in ((LossKind.EUCLIDEAN, adversarial_loss), (LossKind.COSINE, adversarial_loss_cosine)):
            expected = (fn(model, x, guides, 1.0, 0) + fn(model, x, guides, 1.0, 1)) / 2
            assert float(multi_decoder_loss(model, x, guides, 1.0, kind)) == pytest.approx(float(expected))


class TestLossGradients:
    """对抗损失的输入梯度数值检验"""

    def _setup(self, tiny_spec):
        model = build_model(tiny_spec).double()
        x = 0.1 + 0.8 * _x(0)
        guides = GuideSet(positive=_x(1), negatives=[_x(2), _x(3)])
        return model, x.requires_grad_(True), guides

    def test_euclidean_gradcheck(self, tiny_spec):
        """测试欧氏对抗损失对输入的解析梯度与数值梯度一致"""
        model, x, guides = self._setup(tiny_spec)
        assert torch.autograd.gradcheck(
            lambda z: adversarial_loss(model, z, guides, 0.1), (x,), eps=1e-6, atol=1e-4,
        )

    def test_cosine_gradcheck(self, tiny_spec):
        """测试余弦对抗损失对输入的解析梯度与数值梯度一致"""
        model, x, guides = self._setup(tiny_spec)
        assert torch.autograd.gradcheck(
            lambda z: adversarial_loss_cosine(model, z, guides, 2.0), (x,), eps=1e-6, atol=1e-4,
        )


class TestProjection:
    """预算投影测试"""

    def test_linf(self):
        """测试 ℓ∞ 投影逐像素裁剪"""
        x0 = torch.full(TINY_SHAPE, 0.5, dtype=torch.float64)
        x = x0 + torch.linspace(-0.3, 0.3, x0.numel(), dtype=torch.float64).reshape(TINY_SHAPE)
        out = project(x0, x, Budget(epsilon=0.1))
        assert float((out - x0).abs().max()) == pytest.approx(0.1)
        assert is_feasible(x0, out, Budget(epsilon=0.1))

    def test_l2(self):
        """测试 ℓ2 投影按比例缩放"""
        x0 = torch.full(TINY_SHAPE, 0.5, dtype=torch.float64)
        x = x0 + 0.01
        budget = Budget(norm="l2", epsilon=0.05)
        out = project(x0, x, budget)
        assert float((out - x0).norm()) == pytest.approx(0.05, rel=1e-9)
        inside = x0 + 1e-4
        assert torch.equal(project(x0, inside, budget), inside)

    def test_pixel_range(self):
        """测试投影后裁剪到 [0, 1]"""
        x0 = torch.ones(TINY_SHAPE, dtype=torch.float64)
        out = project(x0, x0 + 0.05, Budget(epsilon=0.1))
        assert float(out.max()) == 1.0

    def test_assert_feasible(self):
        """测试超出预算时报错"""
        x0 = torch.full(TINY_SHAPE, 0.5, dtype=torch.float64)
        with pytest.raises(FeasibilityError):
            assert_feasible(x0, x0 + 0.2, Budget(epsilon=0.1))


class TestBaseline:
    """基线攻击测试"""

    def test_ifgsm_linear_closed_form(self):
        """测试恒等重建下 I-FGSM 沿 sign(负原型 − 原图) 走满预算"""
        x0, neg = _x(0), _x(1)
        config = _config(epsilon=0.05, step_size=0.01, baseline_iters=10, lambda_=1e-3)
        trace = AttackTrace()
        out = run_baseline(LinearStub(), x0, GuideSet(positive=x0, negatives=[neg]), config, trace=trace)
        expected = (x0 + 0.05 * torch.sign(neg - x0)).clamp(0, 1)
        assert torch.allclose(out, expected, atol=1e-12)
        assert trace.baseline_losses[-1] > trace.baseline_losses[0]

    def test_pgd_deterministic_and_feasible(self):
        """测试 PGD 随机起点由生成器决定，结果满足预算"""
        x0, neg = _x(0), _x(1)
        config = _config(epsilon=0.05, step_size=0.01, baseline="pgd", baseline_iters=3)
        guides = GuideSet(positive=x0, negatives=[neg])
        a = run_baseline(LinearStub(), x0, guides, config, generator=make_generator(4))
        b = run_baseline(LinearStub(), x0, guides, config, generator=make_generator(4))
        assert torch.equal(a, b)
        assert is_feasible(x0, a, config.budget)

    def test_none_returns_natural_image(self):
        """测试 none 基线直接返回异类自然图像"""
        x0, neg = _x(0), _x(1)
        out = run_baseline(LinearStub(), x0, GuideSet(positive=x0, negatives=[neg]), _config(baseline="none"))
        assert torch.equal(out, neg)

    def test_l2_step_stays_in_ball(self):
        """测试 ℓ2 攻击满足预算"""
        x0, neg = _x(0), _x(1)
        config = _config(norm="l2", epsilon=0.5, step_size=0.01, baseline_iters=20)
        out = run_baseline(LinearStub(), x0, GuideSet(positive=x0, negatives=[neg]), config)
        assert float((out - x0).norm()) <= 0.5 + 1e-9

    def test_supervised_requires_label(self):
        """测试有监督替代模型的攻击需要真实标签"""
        model = build_classifier(ClassifierSpec(input_shape=TINY_SHAPE, base_width=8)).double()
        x0 = _x()
        with pytest.raises(GuideError):
            run_baseline(model, x0, GuideSet(positive=x0, negatives=[x0]), _config(baseline_iters=1))

    def test_ifgsm_loss_mostly_non_decreasing(self, tiny_spec):
        """测试训练后的替代模型上 I-FGSM 迭代的对抗损失至少 90% 的步不下降"""
        aux = make_aux()
        model, _ = train_substitute(
            build_model(tiny_spec), aux, TrainConfig(mechanism="rotation", max_iterations=60, check_interval=20, seed=0),
        )
        work = working_copy(model)
        x0 = aux.target.image.double()
        guides = GuideSet(positive=x0, negatives=[aux.examples[-1].image.double()])
        config = _config(epsilon=0.1, step_size=1 / 255, baseline_iters=20)
        trace = AttackTrace()
        run_baseline(work, x0, guides, config, trace=trace)
        losses = trace.baseline_losses
        steps = list(zip(losses, losses[1:]))
        assert sum(b >= a - 1e-12 for a, b in steps) >= 0.9 * len(steps)


class TestILA:
    """中间层攻击测试"""

    def test_objective_monotone_on_linear_encoder(self):
        """测试线性编码器上 ILA 目标单调不减"""
        x0, guide = _x(0), _x(1)
        trace = AttackTrace()
        config = _config(epsilon=0.05, step_size=0.005, ila_iters=15)
        out = run_ila(LinearStub(), x0, guide, config, trace)
        objectives = trace.ila_objectives
        assert all(b >= a - 1e-12 for a, b in zip(objectives, objectives[1:]))
        assert objectives[-1] > 0
        assert is_feasible(x0, out, config.budget)

    def test_zero_direction_falls_back(self):
        """测试引导方向为零时返回引导样本"""
        x0 = _x()
        trace = AttackTrace()
        out = run_ila(LinearStub(), x0, x0.clone(), _config(ila_iters=5), trace)
        assert trace.ila_fallback
        assert torch.equal(out, x0)

    def test_zero_iterations_returns_x0(self):
        """测试 ila_iters=0 时原样返回 x0"""
        x0, guide = _x(0), _x(1)
        trace = AttackTrace()
        out = run_ila(LinearStub(), x0, guide, _config(epsilon=0.02, ila_iters=0), trace)
        assert torch.equal(out, x0)
        assert not trace.ila_fallback
        assert trace.ila_objectives == []


class TestBuildGuides:
    """正负原型构造测试"""

    def test_default_without_bank(self):
        """测试非原型机制：正原型为目标本身，一张异类负原型"""
        aux = make_aux(target_index=1)
        guides = build_guides(aux)
        assert torch.equal(guides.positive, aux.target.image)
        assert len(guides.negatives) == 1
        opposite = [ex.image for ex in aux.examples if ex.label == 1]
        assert any(torch.equal(guides.negatives[0], img) for img in opposite)

    def test_with_bank(self):
        """测试原型机制：每个解码器一个正原型，K 个异类原型"""
        aux = make_aux(n=8, target_index=5)
        bank = sample_prototype_bank(aux, K=3, seed=0)
        guides = build_guides(aux, bank)
        assert len(guides.decoder_positives) == 3
        assert len(guides.negatives) == 3
        for k, (p0, p1) in enumerate(bank.prototypes):
            assert torch.equal(guides.positive_for(k), p1)
            assert torch.equal(guides.negatives[k], p0)

    def test_explicit_count_with_replacement(self):
        """测试指定数量超过异类样本数时有放回采样"""
        aux = make_aux(n=6)
        guides = build_guides(aux, num_negatives=5, seed=1)
        assert len(guides.negatives) == 5


class TestCraft:
    """生成入口测试"""

    def _setup(self, tiny_spec, **kw):
        aux = make_aux()
        model = build_model(tiny_spec)
        config = _config(epsilon=kw.pop("epsilon", 0.1), baseline_iters=3, ila_iters=3, **kw)
        return model, aux, config

    def test_feasible_and_recorded(self, tiny_spec):
        """测试结果满足预算并记录生成参数"""
        model, aux, config = self._setup(tiny_spec)
        x_adv, record = craft(model, aux, config, Mechanism.ROTATION, target_id="t000")
        assert x_adv.dtype == torch.float64
        assert is_feasible(aux.target.image.double(), x_adv, config.budget)
        assert record.target_id == "t000"
        assert record.mechanism == "rotation"
        assert record.num_negatives == 1
        assert record.linf_distance <= 0.1 + 1e-9

    def test_zero_epsilon_is_identity(self, tiny_spec):
        """测试 ε=0 时输出等于原图"""
        model, aux, config = self._setup(tiny_spec, epsilon=0.0)
        x_adv, _ = craft(model, aux, config, Mechanism.NAIVE_AE)
        assert torch.equal(x_adv, aux.target.image.double())

    def test_deterministic(self, tiny_spec):
        """测试同一配置生成结果逐位一致"""
        model, aux, config = self._setup(tiny_spec, baseline="pgd")
        a, _ = craft(model, aux, config, Mechanism.JIGSAW)
        b, _ = craft(model, aux, config, Mechanism.JIGSAW)
        assert torch.equal(a, b)

    def test_original_model_untouched(self, tiny_spec):
        """测试生成过程不修改原模型"""
        model, aux, config = self._setup(tiny_spec)
        before = model.parameter_vector()
        craft(model, aux, config, Mechanism.ROTATION)
        assert torch.equal(model.parameter_vector(), before)
        assert next(model.parameters()).dtype == torch.float32

    def test_zero_ila_iterations_uses_projected_guide(self, tiny_spec):
        """测试 ila_iters=0 时以投影后的引导样本作为结果并标记回退"""
        aux = make_aux()
        config = _config(epsilon=0.03, baseline="none", ila_iters=0)
        x_adv, record = craft(build_model(tiny_spec), aux, config, Mechanism.ROTATION)
        x0 = aux.target.image.double()
        guide = build_guides(aux, seed=config.seed).negatives[0].double()
        assert torch.equal(x_adv, project(x0, guide, config.budget))
        assert record.ila_fallback
        assert record.ila_objective_final is None

    def test_prototypical_multi_decoder_cosine(self, tiny_spec):
        """测试多解码器原型模型的余弦损失攻击"""
        aux = make_aux()
        model = build_model(tiny_spec.model_copy(update={"num_decoders": 2}))
        bank = sample_prototype_bank(aux, K=2, seed=0)
        config = _config(baseline_iters=2, ila_iters=2, loss_kind="cosine")
        x_adv, record = craft(model, aux, config, Mechanism.PROTOTYPICAL, bank)
        assert record.num_negatives == 2
        assert is_feasible(aux.target.image.double(), x_adv, config.budget)

    def test_supervised_substitute(self):
        """测试有监督替代模型"""
        aux = make_aux()
        model = build_classifier(ClassifierSpec(input_shape=TINY_SHAPE, base_width=8))
        config = _config(baseline_iters=2, ila_iters=2)
        x_adv, record = craft(model, aux, config)
        assert record.mechanism == "naive_supervised"
        assert is_feasible(aux.target.image.double(), x_adv, config.budget)


class TestQuantize:
    """8 位量化测试"""

    @pytest.mark.parametrize("norm,epsilon", [("linf", 0.03), ("linf", 0.1), ("l2", 0.5), ("l2", 2.0)])
    def test_feasible_on_grid(self, norm, epsilon):
        """测试量化结果落在 8 位网格上且相对网格原图满足预算"""
        budget = Budget(norm=norm, epsilon=epsilon)
        x0 = _x(0, torch.float32)
        x = project(x0.double(), _x(1), budget)
        q = quantize_perturbation(x0, x, budget)
        scaled = q * 255
        assert torch.allclose(scaled, scaled.round(), atol=1e-9)
        assert is_feasible(on_grid(x0), q, budget)

    def test_zero_epsilon_identical(self):
        """测试 ε=0 时量化结果与网格原图一致"""
        x0 = _x(0, torch.float32)
        q = quantize_perturbation(x0, _x(1), Budget(epsilon=0.0))
        assert torch.equal(q, on_grid(x0))
