"""
模型检查点

自描述的二进制容器：format_version + 模型类型 + 规格 + 规格哈希 + 参数 + 附加信息。
加载时校验格式版本与规格哈希，不匹配直接拒绝。
"""
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch
import torch.nn as nn
from loguru import logger
from pydantic import BaseModel

from nobox.core.exceptions import SpecMismatchError
from nobox.core.reproducibility import config_hash

FORMAT_VERSION = 1


def _registry(kind: str):
    """模型类型 → (规格类, 构建函数)"""
    if kind == "substitute":
        from nobox.models.autoencoder.substitute import build_model
        from nobox.models.schemas import ModelSpec
        return ModelSpec, build_model
    if kind == "classifier":
        from nobox.models.classifier.naive import ClassifierSpec, build_classifier
        return ClassifierSpec, build_classifier
    if kind == "victim":
        from nobox.models.victims.zoo import VictimSpec, build_victim
        return VictimSpec, build_victim
    raise SpecMismatchError(f"未知的模型类型: {kind}")


def save_checkpoint(
    model: nn.Module,
    path: Union[str, Path],
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """保存检查点"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec: BaseModel = model.spec
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": model.KIND,
        "spec": spec.model_dump(mode="json", by_alias=True),
        "spec_hash": config_hash(spec),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    logger.debug(f"检查点已保存: {path}（{model.KIND}，spec {payload['spec_hash'][:12]}）")
    return path


def load_checkpoint(
    path: Union[str, Path],
    expected_spec: Optional[BaseModel] = None,
) -> Tuple[nn.Module, Dict[str, Any]]:
    """
    加载检查点

    Args:
        path: 检查点路径
        expected_spec: 期望的模型规格；给出时哈希必须一致

    Returns:
        (模型, 附加信息)
    """
    path = Path(path)
    if not path.exists():
        raise SpecMismatchError(f"检查点不存在: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)

    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise SpecMismatchError(f"不支持的检查点格式版本: {version}（期望 {FORMAT_VERSION}）")

    spec_cls, builder = _registry(payload.get("kind", ""))
    spec = spec_cls.model_validate(payload["spec"])
    stored_hash = payload.get("spec_hash")
    if config_hash(spec) != stored_hash:
        raise SpecMismatchError(f"检查点 {path} 的规格哈希已损坏")
    if expected_spec is not None and config_hash(expected_spec) != stored_hash:
        raise SpecMismatchError(
            f"检查点规格 {stored_hash[:12]} 与期望规格 {config_hash(expected_spec)[:12]} 不一致"
        )

    model = builder(spec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
