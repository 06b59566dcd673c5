"""
评估服务 - 原型距离分类器、受害者准确率、验证 ROC 曲线
"""
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from loguru import logger
from sklearn import metrics

from nobox.core.exceptions import EmptyEvaluationError, MechanismError
from nobox.models.schemas import EvalReport, ImageTensor, PrototypeBank, RocCurve
from nobox.models.victims.zoo import VerificationModel, VictimClassifier

Label = Union[int, torch.Tensor]


def prototype_distances(model, x: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """
    每个类别的平均（不平方）欧氏距离

    d_y = (1/K) Σ_k ‖Dec_k(Enc(x)) − x_k^(y)‖

    Returns:
        [B, 2]
    """
    if bank.K != model.num_decoders:
        raise MechanismError(f"原型库 K={bank.K} 与模型解码器数 {model.num_decoders} 不一致")
    batch = x.unsqueeze(0) if x.dim() == 3 else x
    per_decoder = []
    with torch.no_grad():
        for k, recon in enumerate(model.reconstruct_all(batch)):
            flat = recon.double().flatten(start_dim=1)
            p0, p1 = (bank.prototypes[k][y].double().flatten() for y in (0, 1))
            per_decoder.append(torch.stack([
                (flat - p0).norm(dim=1),
                (flat - p1).norm(dim=1),
            ], dim=1))
    return torch.stack(per_decoder).sum(dim=0) / bank.K


def _labels(distances: torch.Tensor, single: bool) -> Label:
    # 距离相等时判为类别 0
    labels = (distances[:, 1] < distances[:, 0]).long()
    return int(labels[0]) if single else labels


def prototype_classify(model, x: ImageTensor, bank: PrototypeBank) -> Label:
    """单解码器原型分类：ŷ = argmin_y ‖Dec(Enc(x)) − x^(y)‖"""
    if model.num_decoders != 1:
        raise MechanismError("prototype_classify 仅适用于单解码器模型，请使用 prototype_classify_multi")
    return _labels(prototype_distances(model, x, bank), x.dim() == 3)


def prototype_classify_multi(model, x: ImageTensor, bank: PrototypeBank) -> Label:
    """多解码器原型分类：对各解码器的距离取平均后求 argmin"""
    return _labels(prototype_distances(model, x, bank), x.dim() == 3)


def accuracy_on(
    victim: VictimClassifier,
    examples: Sequence[Tuple[ImageTensor, int]],
    batch_size: int = 256,
) -> float:
    """受害者在 (图像, 真实标签) 列表上的准确率"""
    correct, total = count_correct(victim, examples, batch_size)
    return correct / total


def count_correct(
    victim: VictimClassifier,
    examples: Sequence[Tuple[ImageTensor, int]],
    batch_size: int = 256,
) -> Tuple[int, int]:
    if not examples:
        raise EmptyEvaluationError("评估样本为空")
    correct = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        images = torch.stack([img for img, _ in chunk])
        labels = torch.tensor([int(y) for _, y in chunk], dtype=torch.long)
        correct += int((victim.predict(images).cpu() == labels).sum())
    return correct, len(examples)


def evaluate_victims(
    victims: Sequence[VictimClassifier],
    examples: Sequence[Tuple[ImageTensor, int]],
    method: str = "",
    config_hash: str = "",
    seed: int = 0,
) -> EvalReport:
    """逐个受害者评估（顺序执行，控制内存占用）"""
    report = EvalReport(method=method, config_hash=config_hash, seed=seed)
    for victim in victims:
        correct, total = count_correct(victim, examples)
        report.add(victim.name, correct, total)
        logger.info(f"[{method}] 受害者 {victim.name}: {correct}/{total} = {correct / total:.2%}")
    return report


def roc_from_scores(genuine_scores: Sequence[float], impostor_scores: Sequence[float]) -> RocCurve:
    """
    由相似度分数计算 ROC

    以每个不同的分数为阈值（分数 ≥ 阈值判为同一身份），TPR 取自正样本对，FPR 取自负样本对，
    AUC 使用梯形法。
    """
    if len(genuine_scores) == 0 or len(impostor_scores) == 0:
        raise EmptyEvaluationError("正样本对与负样本对都不能为空")
    scores = np.concatenate([np.asarray(genuine_scores, float), np.asarray(impostor_scores, float)])
    labels = np.concatenate([np.ones(len(genuine_scores)), np.zeros(len(impostor_scores))])
    fpr, tpr, thresholds = metrics.roc_curve(labels, scores, pos_label=1, drop_intermediate=False)
    # 起点阈值为 +inf，序列化时替换为有限值
    thresholds = np.where(np.isinf(thresholds), scores.max() + 1.0, thresholds)
    auc = float(np.clip(metrics.auc(fpr, tpr), 0.0, 1.0))
    return RocCurve(thresholds=thresholds.tolist(), tpr=tpr.tolist(), fpr=fpr.tolist(), auc=auc)


def roc_curve(
    model: VerificationModel,
    genuine_pairs: Sequence[Tuple[ImageTensor, ImageTensor]],
    impostor_pairs: Sequence[Tuple[ImageTensor, ImageTensor]],
) -> RocCurve:
    """验证模型在正 / 负样本对上的 ROC 曲线"""
    if not genuine_pairs or not impostor_pairs:
        raise EmptyEvaluationError("正样本对与负样本对都不能为空")

    def _scores(pairs) -> List[float]:
        return [model.similarity(model.embed(a), model.embed(b)) for a, b in pairs]

    return roc_from_scores(_scores(genuine_pairs), _scores(impostor_pairs))
