"""
可复现性工具 - 种子派生、规范化哈希
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Union

import torch
from pydantic import BaseModel

_SEED_MASK = 0x7FFFFFFF


def derive_seed(master: int, *keys: Any) -> int:
    """
    从主种子派生独立子种子

    同一 (master, keys) 总得到同一结果，不同 keys 之间统计独立。
    """
    payload = json.dumps([int(master), *[str(k) for k in keys]]).encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "big") & _SEED_MASK


def make_generator(seed: int) -> torch.Generator:
    """创建 CPU 随机数生成器"""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def canonical_json(data: Union[BaseModel, Any]) -> str:
    """规范化 JSON：键排序、无多余空白，字段顺序不影响结果"""
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json", by_alias=True)
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(data: Union[BaseModel, Any]) -> str:
    """配置哈希（SHA-256 十六进制）"""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def file_sha256(path: Union[str, Path]) -> str:
    """文件内容哈希"""
    sha = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            sha.update(chunk)
    return sha.hexdigest()
