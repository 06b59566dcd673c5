"""
测试公共夹具
"""
import os

# settings 在导入时读取环境变量，测试期间不写日志文件
os.environ.setdefault("LOG_TO_FILE", "false")
os.environ.setdefault("LOG_LEVEL", "WARNING")

from pathlib import Path  # noqa: E402

import pytest  # noqa: E402
import torch  # noqa: E402

from nobox.core.reproducibility import make_generator  # noqa: E402
from nobox.models.schemas import AuxiliarySet, LabeledImage, ModelSpec, RunConfig  # noqa: E402

TINY_SHAPE = (3, 16, 16)


def random_images(count: int, seed: int, shape=TINY_SHAPE):
    gen = make_generator(seed)
    return [torch.rand(shape, generator=gen) for _ in range(count)]


def make_aux(n: int = 6, seed: int = 0, target_index: int = 0, shape=TINY_SHAPE) -> AuxiliarySet:
    """前一半为类别 0，后一半为类别 1"""
    images = random_images(n, seed, shape)
    examples = [LabeledImage(image=img, label=int(i >= n // 2)) for i, img in enumerate(images)]
    sources = [(ex.label, i % (n // 2)) for i, ex in enumerate(examples)]
    return AuxiliarySet(examples=examples, target_index=target_index, sources=sources)


@pytest.fixture
def tiny_spec():
    return ModelSpec(input_shape=TINY_SHAPE, base_width=8, num_residual_blocks=1, seed=0)


@pytest.fixture
def aux():
    return make_aux()


def tiny_run_config(root: Path, **updates) -> RunConfig:
    """玩具规模、几秒内跑完的实验配置"""
    raw = {
        "version": 1,
        "name": "tiny",
        "mechanism": "rotation",
        "n": 4,
        "data": {"root": str(root / "data" / "aux"), "image_shape": list(TINY_SHAPE)},
        "model": {"base_width": 8, "num_residual_blocks": 1},
        "train": {"max_iterations": 4, "check_interval": 2, "plateau_patience": 5},
        "attack": {"epsilon": 0.1, "baseline_iters": 3, "ila_iters": 3},
        "targets": {"count": 2},
        "victims": {
            "root": str(root / "data" / "victim"),
            "checkpoint_dir": str(root / "victims"),
            "architectures": ["small_cnn"],
            "epochs": 1,
        },
        "output_root": str(root / "runs"),
    }
    for key, value in updates.items():
        if isinstance(value, dict):
            raw[key] = {**raw.get(key, {}), **value}
        else:
            raw[key] = value
    return RunConfig.model_validate(raw)


@pytest.fixture
def tiny_config(tmp_path):
    return tiny_run_config(tmp_path)
