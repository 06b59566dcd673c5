"""
攻击服务 - 在替代模型上生成对抗样本

流程：构造正负原型 → 基线攻击（I-FGSM / PGD / none）得到方向引导 → 在编码器输出上做 ILA → 投影回预算内。
本模块只依赖替代模型与辅助集，不得引用任何受害者模型或远程评估接口。
"""
import copy
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from nobox.core.exceptions import FeasibilityError, GuideError, ZeroNormEmbeddingError
from nobox.core.reproducibility import derive_seed, make_generator
from nobox.models.classifier.naive import NaiveClassifier
from nobox.models.schemas import (
    AttackConfig,
    AuxiliarySet,
    BaselineKind,
    Budget,
    CraftRecord,
    GuideSet,
    ImageTensor,
    LossKind,
    Mechanism,
    NormKind,
    PrototypeBank,
)

NORM_GUARD = 1e-12
LINF_TOLERANCE = 1e-9
L2_TOLERANCE = 1e-6

Objective = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class AttackTrace:
    """攻击过程记录"""
    baseline_losses: List[float] = field(default_factory=list)
    ila_objectives: List[float] = field(default_factory=list)
    ila_fallback: bool = False


# ==================== 对抗损失 ====================

def _softmax_nll(logits: torch.Tensor) -> torch.Tensor:
    """第 0 项（正原型）在 softmax 中份额的负对数"""
    return torch.logsumexp(logits, dim=0) - logits[0]


def _check_guides(guides: GuideSet):
    if not guides.negatives:
        raise GuideError("负原型列表不能为空")


def adversarial_loss(model, x: ImageTensor, guides: GuideSet, lambda_: float = 1.0, k: int = 0) -> torch.Tensor:
    """
    欧氏距离版对抗损失

    L = −log[exp(−λ‖r − x̃_pos‖²) / Σ_{j ∈ {pos} ∪ neg} exp(−λ‖r − x̃_j‖²)]，r = Dec_k(Enc(x))
    """
    _check_guides(guides)
    recon = model.reconstruct(x, k).flatten()
    candidates = [guides.positive_for(k)] + list(guides.negatives)
    sq_dist = torch.stack([(recon - c.to(recon).flatten()).pow(2).sum() for c in candidates])
    return _softmax_nll(-lambda_ * sq_dist)


def _unit(vector: torch.Tensor, what: str) -> torch.Tensor:
    norm = vector.norm()
    if float(norm) <= NORM_GUARD:
        raise ZeroNormEmbeddingError(f"{what} 的嵌入范数为零，余弦相似度无定义")
    return vector / norm


def adversarial_loss_cosine(model, x: ImageTensor, guides: GuideSet, lambda_: float = 1.0, k: int = 0) -> torch.Tensor:
    """
    余弦相似度版对抗损失

    以 exp(λ·cos(emb(x), emb(x̃))) 为权重，分母同样覆盖正原型与全部负原型
    """
    _check_guides(guides)
    emb = _unit(model.embedding(x, k).flatten(), "输入图像")
    candidates = [guides.positive_for(k)] + list(guides.negatives)
    with torch.no_grad():
        refs = [
            _unit(model.embedding(c.to(x), k).flatten(), "正原型" if i == 0 else f"负原型 {i - 1}")
            for i, c in enumerate(candidates)
        ]
    cosine = torch.stack([emb @ ref for ref in refs])
    return _softmax_nll(lambda_ * cosine)


def multi_decoder_loss(
    model,
    x: ImageTensor,
    guides: GuideSet,
    lambda_: float = 1.0,
    loss_kind: LossKind = LossKind.EUCLIDEAN,
) -> torch.Tensor:
    """对所有解码器的对抗损失取平均"""
    fn = adversarial_loss_cosine if LossKind(loss_kind) == LossKind.COSINE else adversarial_loss
    terms = [fn(model, x, guides, lambda_, k) for k in range(model.num_decoders)]
    return torch.stack(terms).mean()


def classification_loss(classifier: NaiveClassifier, x: ImageTensor, label: int) -> torch.Tensor:
    """有监督替代模型的交叉熵（无目标攻击时最大化）"""
    logits = classifier(x.unsqueeze(0) if x.dim() == 3 else x)
    target = torch.full((logits.shape[0],), int(label), dtype=torch.long)
    return F.cross_entropy(logits, target)


def make_objective(model, guides: GuideSet, config: AttackConfig, label: Optional[int] = None) -> Objective:
    """基线攻击要最大化的目标函数"""
    if isinstance(model, NaiveClassifier):
        if label is None:
            raise GuideError("有监督替代模型的攻击需要目标样本的真实标签")
        return lambda x: classification_loss(model, x, label)
    return lambda x: multi_decoder_loss(model, x, guides, config.lambda_, config.loss_kind)


# ==================== 投影与步进 ====================

def project(x0: ImageTensor, x: ImageTensor, budget: Budget) -> ImageTensor:
    """把 x 投影到以 x0 为中心的预算球内，再裁剪到 [0, 1]"""
    delta = x - x0
    if NormKind(budget.norm) == NormKind.LINF:
        delta = delta.clamp(-budget.epsilon, budget.epsilon)
    else:
        norm = delta.norm()
        if float(norm) > budget.epsilon:
            delta = delta * (budget.epsilon / norm)
    return (x0 + delta).clamp(0.0, 1.0)


def _ascent_step(grad: torch.Tensor, budget: Budget) -> torch.Tensor:
    if NormKind(budget.norm) == NormKind.LINF:
        return budget.step_size * grad.sign()
    # ℓ2：归一化梯度，单步长度与同步长的符号步一致
    norm = grad.norm()
    if float(norm) == 0.0:
        return torch.zeros_like(grad)
    return budget.step_size * grad.numel() ** 0.5 * grad / norm


def _gradient(objective: Objective, x: torch.Tensor) -> Tuple[float, torch.Tensor]:
    x = x.detach().requires_grad_(True)
    value = objective(x)
    (grad,) = torch.autograd.grad(value, x)
    return float(value), grad


def is_feasible(x0: ImageTensor, x: ImageTensor, budget: Budget) -> bool:
    delta = (x - x0).double()
    if float(x.min()) < 0.0 or float(x.max()) > 1.0:
        return False
    if NormKind(budget.norm) == NormKind.LINF:
        return float(delta.abs().max()) <= budget.epsilon + LINF_TOLERANCE
    return float(delta.norm()) <= budget.epsilon + L2_TOLERANCE


def assert_feasible(x0: ImageTensor, x: ImageTensor, budget: Budget):
    if not is_feasible(x0, x, budget):
        delta = (x - x0).double()
        raise FeasibilityError(
            f"对抗样本超出预算: ℓ∞={float(delta.abs().max()):.3e}, ℓ2={float(delta.norm()):.3e}, "
            f"范围=[{float(x.min()):.3f}, {float(x.max()):.3f}], 预算 {budget.norm.value} ε={budget.epsilon}"
        )


# ==================== 基线攻击与 ILA ====================

def run_baseline(
    model,
    x0: ImageTensor,
    guides: GuideSet,
    config: AttackConfig,
    label: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    trace: Optional[AttackTrace] = None,
) -> ImageTensor:
    """
    基线攻击，返回方向引导 x'

    - ifgsm: 从 x0 出发做 baseline_iters 次符号梯度上升，每步投影
    - pgd: 同上，但起点为预算球内的均匀随机点
    - none: 直接返回一张另一类别的自然图像
    """
    baseline = BaselineKind(config.baseline)
    if baseline == BaselineKind.NONE:
        _check_guides(guides)
        return guides.negatives[0].to(x0).clone()

    budget = config.budget
    objective = make_objective(model, guides, config, label)
    x = x0.detach().clone()
    if baseline == BaselineKind.PGD:
        gen = generator if generator is not None else make_generator(derive_seed(config.seed, "pgd"))
        noise = torch.rand(x0.shape, generator=gen, dtype=x0.dtype) * 2 - 1
        x = project(x0, x0 + budget.epsilon * noise, budget)

    for _ in range(config.baseline_iters):
        value, grad = _gradient(objective, x)
        if trace is not None:
            trace.baseline_losses.append(value)
        x = project(x0, x + _ascent_step(grad, budget), budget).detach()
    if trace is not None and config.baseline_iters:
        with torch.no_grad():
            trace.baseline_losses.append(float(objective(x)))
    return x


def ila_objective(model, x: ImageTensor, h0: torch.Tensor, direction: torch.Tensor) -> torch.Tensor:
    """⟨Enc(x) − Enc(x0), Enc(x') − Enc(x0)⟩"""
    return ((model.encode(x) - h0).flatten() * direction.flatten()).sum()


def run_ila(
    model,
    x0: ImageTensor,
    guide: ImageTensor,
    config: AttackConfig,
    trace: Optional[AttackTrace] = None,
) -> ImageTensor:
    """
    在编码器输出上放大沿引导方向的中间层扰动

    从 x0 出发做 ila_iters 次符号梯度上升并返回最后一次迭代；ila_iters 为 0 时原样返回 x0，
    由 craft 改用投影后的引导样本。引导方向为零时记录警告并返回投影后的引导样本。
    """
    if config.ila_iters == 0:
        return x0.detach().clone()
    with torch.no_grad():
        h0 = model.encode(x0)
        direction = model.encode(guide.to(x0)) - h0
    if float(direction.norm()) == 0.0:
        logger.warning("ILA 引导方向为零（引导样本与原图编码相同），返回投影后的引导样本")
        if trace is not None:
            trace.ila_fallback = True
        return project(x0, guide.to(x0), config.budget).detach()

    budget = config.budget
    x = x0.detach().clone()
    for _ in range(config.ila_iters):
        value, grad = _gradient(lambda z: ila_objective(model, z, h0, direction), x)
        if trace is not None:
            trace.ila_objectives.append(value)
        x = project(x0, x + _ascent_step(grad, budget), budget).detach()
    if trace is not None:
        with torch.no_grad():
            trace.ila_objectives.append(float(ila_objective(model, x, h0, direction)))
    return x


# ==================== 生成入口 ====================

def _sample_opposite(aux: AuxiliarySet, label: int, count: int, gen: torch.Generator) -> List[ImageTensor]:
    pool = aux.indices_of(1 - label)
    if count <= len(pool):
        picked = torch.randperm(len(pool), generator=gen)[:count].tolist()
    else:
        picked = torch.randint(len(pool), (count,), generator=gen).tolist()
    return [aux.examples[pool[i]].image for i in picked]


def build_guides(
    aux: AuxiliarySet,
    bank: Optional[PrototypeBank] = None,
    num_negatives: Optional[int] = None,
    seed: int = 0,
) -> GuideSet:
    """
    构造目标样本的正负原型

    原型机制（给出 bank）：第 k 个解码器的正原型为 x_k^(y)，负原型默认取 K 个异类原型；
    其余机制：正原型为目标样本本身，负原型默认从异类样本中采样 1 张。
    指定 num_negatives 时从辅助集的异类样本中采样（数量不足时有放回）。
    """
    target = aux.target
    y = target.label
    gen = make_generator(derive_seed(seed, "negatives"))
    if bank is not None:
        positives = [pair[y] for pair in bank.prototypes]
        if num_negatives is None:
            negatives = [pair[1 - y] for pair in bank.prototypes]
        else:
            negatives = _sample_opposite(aux, y, num_negatives, gen)
        return GuideSet(positive=positives[0], negatives=negatives, decoder_positives=positives)
    negatives = _sample_opposite(aux, y, num_negatives or 1, gen)
    return GuideSet(positive=target.image, negatives=negatives)


def working_copy(model: nn.Module) -> nn.Module:
    """float64、推理模式、参数冻结的模型副本（不修改原模型）"""
    clone = copy.deepcopy(model).double().eval()
    for p in clone.parameters():
        p.requires_grad_(False)
    return clone


def _as_double(guides: GuideSet) -> GuideSet:
    def cast(img):
        return img.detach().double()

    return GuideSet(
        positive=cast(guides.positive),
        negatives=[cast(n) for n in guides.negatives],
        decoder_positives=[cast(p) for p in guides.decoder_positives] if guides.decoder_positives else None,
    )


def craft(
    model: nn.Module,
    aux: AuxiliarySet,
    config: AttackConfig,
    mechanism: Optional[Mechanism] = None,
    bank: Optional[PrototypeBank] = None,
    target_id: str = "",
) -> Tuple[ImageTensor, CraftRecord]:
    """
    为辅助集中的目标样本生成对抗样本

    Returns:
        (float64 对抗样本, 生成记录)
    """
    if mechanism is None:
        if isinstance(model, NaiveClassifier):
            mechanism = Mechanism.NAIVE_SUPERVISED
        else:
            mechanism = Mechanism.PROTOTYPICAL if bank is not None else Mechanism.NAIVE_AE
    mechanism = Mechanism(mechanism)
    if mechanism != Mechanism.PROTOTYPICAL:
        bank = None

    work = working_copy(model)
    x0 = aux.target.image.detach().double()
    label = aux.target.label
    guides = _as_double(build_guides(aux, bank, config.num_negatives, config.seed))
    trace = AttackTrace()
    budget = config.budget

    guide = run_baseline(
        work, x0, guides, config, label=label,
        generator=make_generator(derive_seed(config.seed, "pgd")),
        trace=trace,
    )
    if config.ila_iters == 0:
        trace.ila_fallback = True
        x_adv = guide
    else:
        x_adv = run_ila(work, x0, guide, config, trace)
    x_adv = project(x0, x_adv, budget).detach()
    assert_feasible(x0, x_adv, budget)

    delta = x_adv - x0
    record = CraftRecord(
        target_id=target_id,
        mechanism=mechanism.value,
        label=label,
        config_hash=config.config_hash(),
        seed=config.seed,
        norm=budget.norm,
        epsilon=budget.epsilon,
        step_size=budget.step_size,
        baseline=config.baseline,
        baseline_iters=config.baseline_iters,
        ila_iters=config.ila_iters,
        lambda_=config.lambda_,
        loss_kind=config.loss_kind,
        num_negatives=len(guides.negatives),
        baseline_loss_start=trace.baseline_losses[0] if trace.baseline_losses else None,
        baseline_loss_final=trace.baseline_losses[-1] if trace.baseline_losses else None,
        ila_objective_final=trace.ila_objectives[-1] if trace.ila_objectives else None,
        ila_fallback=trace.ila_fallback,
        linf_distance=float(delta.abs().max()),
        l2_distance=float(delta.norm()),
    )
    logger.info(
        f"[{target_id or 'target'}] {mechanism.value} {config.baseline.value}+ILA 完成: "
        f"基线损失 {record.baseline_loss_start} → {record.baseline_loss_final}, "
        f"ILA 目标 {record.ila_objective_final}, ℓ∞={record.linf_distance:.4f}"
    )
    return x_adv, record


def on_grid(x0: ImageTensor, levels: int = 255) -> ImageTensor:
    """原图在 8 位网格上的取值"""
    return (x0.detach().double() * levels).round() / levels


def quantize_perturbation(x0: ImageTensor, x: ImageTensor, budget: Budget, levels: int = 255) -> ImageTensor:
    """
    把对抗样本量化到 8 位网格

    先以网格上的原图为中心重新投影，再把扰动按网格级数向零截断，
    量化结果相对 on_grid(x0) 仍满足预算；ε=0 时与原图逐字节一致。
    """
    q0 = (x0.detach().double() * levels).round()
    x = project(q0 / levels, x.detach().double(), budget)
    steps = x * levels - q0
    steps = torch.trunc(steps + steps.sign() * 1e-7)
    return (q0 + steps).clamp(0, levels) / levels
