"""
替代模型训练服务

三种训练机制（旋转 / 拼图还原、原型重建）与两种朴素基线（普通自编码、有监督分类）。
优化器为固定学习率的 ADAM，全批量训练，平滑损失进入平台期时提前停止，返回平滑损失最优的参数。
"""
import copy
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger

from nobox.core.exceptions import MechanismError
from nobox.core.reproducibility import derive_seed, make_generator
from nobox.data.loader import sample_prototype_bank
from nobox.data.transforms import apply_transform, augment_batch, chaos_transform_batch
from nobox.models.classifier.naive import NaiveClassifier
from nobox.models.schemas import (
    CHAOS_MECHANISMS,
    AuxiliarySet,
    LabeledImage,
    Mechanism,
    PrototypeBank,
    TrainConfig,
    TrainLog,
)
from nobox.services.evaluation import prototype_classify_multi

Batch = Union[torch.Tensor, Sequence[torch.Tensor], Sequence[LabeledImage]]


def _images(batch: Batch) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        return batch if batch.dim() == 4 else batch.unsqueeze(0)
    if batch and isinstance(batch[0], LabeledImage):
        return torch.stack([ex.image for ex in batch])
    return torch.stack(list(batch))


def _labeled(batch, labels: Optional[torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
    if labels is None:
        labels = torch.tensor([ex.label for ex in batch], dtype=torch.long)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise MechanismError(f"标签必须属于 {{0, 1}}: {labels.tolist()}")
    return _images(batch), labels


def _squared_error(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """逐样本平方欧氏距离之和的批均值"""
    return (recon - target).pow(2).flatten(start_dim=1).sum(dim=1).mean()


def _require_single_decoder(model, what: str):
    if getattr(model, "num_decoders", 1) != 1:
        raise MechanismError(f"{what} 只适用于单解码器模型，当前 K={model.num_decoders}")


def loss_chaos(
    model,
    batch: Batch,
    mechanism: Mechanism,
    seed: Optional[int] = None,
    generator: Optional[torch.Generator] = None,
    descriptors: Optional[List[Dict[str, Any]]] = None,
) -> torch.Tensor:
    """
    混沌还原损失 (1/n) Σ ‖Dec(Enc(T(x_i))) − x_i‖²

    Args:
        mechanism: rotation 或 jigsaw
        seed / generator: 变换采样的随机源（二选一）
        descriptors: 直接指定每张图像的变换（冻结变换）
    """
    _require_single_decoder(model, "混沌还原损失")
    images = _images(batch)
    if descriptors is not None:
        transformed = torch.stack([apply_transform(img, d) for img, d in zip(images, descriptors)])
    else:
        if Mechanism(mechanism) not in CHAOS_MECHANISMS:
            raise MechanismError(f"机制 {mechanism} 不是混沌变换机制")
        gen = generator if generator is not None else make_generator(seed or 0)
        transformed, _ = chaos_transform_batch(images, mechanism, gen)
    return _squared_error(model.reconstruct(transformed, 0), images)


def loss_naive_ae(model, batch: Batch) -> torch.Tensor:
    """普通自编码损失（T 为恒等变换）"""
    _require_single_decoder(model, "自编码损失")
    images = _images(batch)
    return _squared_error(model.reconstruct(images, 0), images)


def loss_prototypical(
    model,
    batch: Batch,
    bank: PrototypeBank,
    labels: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    原型重建损失

    (1/K) Σ_k (1/n) Σ_i [(1−y_i)‖Dec_k(Enc(x_i)) − x_k^(0)‖² + y_i‖Dec_k(Enc(x_i)) − x_k^(1)‖²]
    """
    if bank.K != model.num_decoders:
        raise MechanismError(f"原型库 K={bank.K} 与模型解码器数 {model.num_decoders} 不一致")
    images, labels = _labeled(batch, labels)
    total = images.new_zeros(())
    for k, recon in enumerate(model.reconstruct_all(images)):
        targets = torch.stack([bank.prototypes[k][int(y)] for y in labels]).to(recon)
        total = total + _squared_error(recon, targets)
    return total / bank.K


def loss_naive_supervised(
    classifier: nn.Module,
    batch: Batch,
    labels: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
    augment: bool = False,
    crop_padding: int = 4,
) -> torch.Tensor:
    """有监督基线的交叉熵损失，可选随机翻转 + 裁剪增强"""
    images, labels = _labeled(batch, labels)
    if augment:
        images = augment_batch(images, generator or make_generator(0), crop_padding)
    return F.cross_entropy(classifier(images), labels)


def check_compatibility(model, mechanism: Mechanism):
    """机制与模型是否匹配"""
    mechanism = Mechanism(mechanism)
    if mechanism == Mechanism.NAIVE_SUPERVISED:
        if not isinstance(model, NaiveClassifier):
            raise MechanismError("naive_supervised 需要 NaiveClassifier 模型")
        return
    if isinstance(model, NaiveClassifier):
        raise MechanismError(f"机制 {mechanism.value} 需要自编码替代模型")
    if mechanism != Mechanism.PROTOTYPICAL and model.num_decoders != 1:
        raise MechanismError(f"机制 {mechanism.value} 只支持 K=1，当前 K={model.num_decoders}")


@torch.no_grad()
def train_accuracy(model, aux: AuxiliarySet, mechanism: Mechanism, bank: Optional[PrototypeBank]) -> float:
    """把替代模型当作分类器，在辅助集上的准确率"""
    was_training = model.training
    model.eval()
    try:
        images, labels = aux.images(), aux.labels()
        if Mechanism(mechanism) == Mechanism.NAIVE_SUPERVISED:
            pred = model(images).argmax(dim=-1)
        else:
            pred = prototype_classify_multi(model, images, bank)
        return float((pred == labels).float().mean())
    finally:
        model.train(was_training)


def train_substitute(
    model: nn.Module,
    aux: AuxiliarySet,
    config: TrainConfig,
    bank: Optional[PrototypeBank] = None,
) -> Tuple[nn.Module, TrainLog]:
    """
    训练替代模型

    Args:
        model: SubstituteModel（或 naive_supervised 时的 NaiveClassifier）
        aux: 辅助集
        config: 训练配置
        bank: 原型库（仅原型机制；缺省时按 config.seed 采样并在训练期间冻结）

    Returns:
        (参数恢复到最优检查点的模型, 训练日志)
    """
    mechanism = Mechanism(config.mechanism)
    check_compatibility(model, mechanism)
    if mechanism == Mechanism.PROTOTYPICAL and bank is None:
        bank = sample_prototype_bank(aux, model.num_decoders, derive_seed(config.seed, "prototypes"))
    track_accuracy = mechanism in (Mechanism.PROTOTYPICAL, Mechanism.NAIVE_SUPERVISED)

    images, labels = aux.images(), aux.labels()
    weight_decay = config.weight_decay if mechanism == Mechanism.NAIVE_SUPERVISED else 0.0
    log = TrainLog()
    logger.info(
        f"开始训练替代模型: 机制={mechanism.value}, n={aux.n}, "
        f"最多 {config.max_iterations} 次迭代, lr={config.learning_rate}"
    )

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        gen = make_generator(derive_seed(config.seed, "train"))
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=weight_decay)
        model.train()

        smoothed: Optional[float] = None
        best_state = copy.deepcopy(model.state_dict())
        reference: Optional[float] = None
        stale = 0

        for it in range(1, config.max_iterations + 1):
            if config.batch and config.batch < aux.n:
                idx = torch.randperm(aux.n, generator=gen)[:config.batch]
                x, y = images[idx], labels[idx]
            else:
                x, y = images, labels

            if mechanism in CHAOS_MECHANISMS:
                loss = loss_chaos(model, x, mechanism, generator=gen)
            elif mechanism == Mechanism.NAIVE_AE:
                loss = loss_naive_ae(model, x)
            elif mechanism == Mechanism.PROTOTYPICAL:
                loss = loss_prototypical(model, x, bank, labels=y)
            else:
                loss = loss_naive_supervised(
                    model, x, labels=y, generator=gen,
                    augment=config.augment, crop_padding=config.crop_padding,
                )

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            value = float(loss)
            log.losses.append(value)
            smoothed = value if smoothed is None else config.smoothing * smoothed + (1 - config.smoothing) * value

            if it % config.check_interval and it != config.max_iterations:
                continue

            # 检查点：记录准确率、更新最优参数、判断平台期
            if track_accuracy:
                acc = train_accuracy(model, aux, mechanism, bank)
                log.accuracy_iterations.append(it)
                log.train_accuracy.append(acc)
            else:
                acc = None
            if smoothed < log.best_smoothed_loss:
                log.best_smoothed_loss = smoothed
                log.best_iteration = it
                best_state = copy.deepcopy(model.state_dict())

            if reference is None or reference - smoothed >= config.plateau_tolerance * abs(reference):
                reference = smoothed
                stale = 0
            else:
                stale += 1

            logger.debug(
                f"iter {it}: loss={value:.6f}, smoothed={smoothed:.6f}"
                + (f", train_acc={acc:.2%}" if acc is not None else "")
            )
            if stale >= config.plateau_patience:
                logger.info(f"平滑损失在 {stale} 个检查窗口内无明显下降，于第 {it} 次迭代提前停止")
                break

    log.stopped_at = len(log.losses)
    model.load_state_dict(best_state)
    model.eval()
    if not math.isfinite(log.best_smoothed_loss):
        logger.warning("训练过程中未出现有限的平滑损失")
    logger.info(
        f"训练结束: 共 {log.stopped_at} 次迭代, 最优检查点 iter={log.best_iteration}, "
        f"平滑损失 {log.best_smoothed_loss:.6f}"
    )
    if bank is not None:
        log.prototype_indices = list(bank.indices)
    return model, log
