"""
运行环境配置管理

实验参数（机制、预算、迭代次数等）不在这里，见 nobox.models.schemas.RunConfig；
这里只放与单次实验无关、由环境变量决定的配置。
"""
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import yaml
from pydantic import ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from nobox.core.exceptions import ConfigValidationError, DataPathError
from nobox.models.schemas import RunConfig

# 字段别名 ↔ 字段名，覆盖其中一个时移除另一个
_ALIAS_PAIRS = {"K": "num_decoders", "num_decoders": "K", "lambda": "lambda_", "lambda_": "lambda"}


class Settings(BaseSettings):
    """应用配置"""

    # 应用基础配置
    APP_NAME: str = "nobox"
    APP_VERSION: str = "1.0.0"

    # CPU 线程数
    TORCH_NUM_THREADS: int = 0  # 0 表示不修改 torch 默认值

    # 日志配置
    LOG_LEVEL: str = "INFO"
    LOG_DIR: str = "./logs"
    LOG_TO_FILE: bool = True

    # 远程受害者模型（仅用于评估，不参与对抗样本生成）
    REMOTE_VICTIM_TOKEN: str = ""  # 必须从环境变量获取

    # 参考受害者服务
    VICTIM_SERVER_HOST: str = "127.0.0.1"
    VICTIM_SERVER_PORT: int = 8100
    VICTIM_SERVER_RATE_LIMIT: str = "120/minute"
    VICTIM_SERVER_TOKEN: str = ""  # 为空时不校验

    # Pydantic-Settings 配置
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",  # 忽略在 Settings 中未定义的其他环境变量
    )


settings = Settings()


# ==================== 实验配置 ====================

def apply_overrides(raw: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """
    按点分路径覆盖原始配置字典，值为 None 的项忽略

    例: {"model.K": 5, "attack.epsilon": 0.08}
    """
    raw = {**raw}
    for dotted, value in overrides.items():
        if value is None:
            continue
        *parents, leaf = dotted.split(".")
        node = raw
        for key in parents:
            child = node.get(key)
            node[key] = {**child} if isinstance(child, dict) else {}
            node = node[key]
        node.pop(_ALIAS_PAIRS.get(leaf, ""), None)
        node[leaf] = value
    return raw


def validate_run_config(raw: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigValidationError.from_pydantic(e) from e


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    读取 YAML 实验配置并应用命令行覆盖

    Args:
        path: 配置文件路径；为 None 时使用默认配置
        overrides: 点分路径 → 值

    Raises:
        ConfigValidationError: 配置不合法（未知字段、取值越界、版本不符等）
    """
    raw: Dict[str, Any] = {"version": 1}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise DataPathError(f"配置文件不存在: {path}")
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigValidationError(f"配置文件 {path} 不是合法的 YAML: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigValidationError(f"配置文件 {path} 的顶层必须是映射")
        raw = loaded or {}
        if "version" not in raw:
            raise ConfigValidationError("配置校验失败 - version: 缺少配置版本号", fields=["version"])
    return validate_run_config(apply_overrides(raw, overrides or {}))


def dump_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    """写出完整（含默认值）的配置，可由 load_run_config 无损读回"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = config.model_dump(mode="json", by_alias=True)
    path.write_text(yaml.safe_dump(data, sort_keys=False, allow_unicode=True), encoding="utf-8")
    return path
