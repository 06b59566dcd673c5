"""
数据加载器 - 按类别目录读取图像、采样辅助集与原型库、生成玩具数据集

目录约定: <root>/<class_name>/*.png
"""
import io
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from PIL import Image, UnidentifiedImageError

from nobox.core.exceptions import (
    ChannelMismatchError,
    DataPathError,
    EmptyDatasetError,
    ImageDecodeError,
    InsufficientImagesError,
    InvalidAuxiliarySizeError,
    InvalidTargetError,
)
from nobox.core.reproducibility import derive_seed, make_generator
from nobox.models.schemas import AuxiliarySet, ImageTensor, LabeledImage, PrototypeBank

IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm"}


def _decode(path: Union[Path, io.BytesIO]) -> Tuple[np.ndarray, int]:
    """解码为 uint8 数组 [H, W, C] 与通道数"""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode == "P":
                img = img.convert("RGBA" if "transparency" in img.info else "RGB")
            bands = img.getbands()
            channels = 1 if bands in (("L",), ("1",), ("I",), ("F",), ("L", "A")) else 3
            img = img.convert("L" if channels == 1 else "RGB")
            array = np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise ImageDecodeError(f"无法解码图像文件 {path}: {e}") from e
    if array.ndim == 2:
        array = array[:, :, None]
    return array, channels


def load_image(path: Union[str, Path], expected_shape: Optional[Sequence[int]] = None) -> ImageTensor:
    """读取单张图像，返回 [C, H, W] 取值 [0, 1] 的 float32 张量"""
    path = Path(path)
    if not path.exists():
        raise DataPathError(f"图像文件不存在: {path}")
    return _to_tensor(*_decode(path), expected_shape, str(path))


def decode_png_bytes(data: bytes, expected_shape: Optional[Sequence[int]] = None) -> ImageTensor:
    """从内存中的图像字节解码"""
    return _to_tensor(*_decode(io.BytesIO(data)), expected_shape, "<bytes>")


def _to_tensor(
    array: np.ndarray,
    channels: int,
    expected_shape: Optional[Sequence[int]],
    source: str,
) -> ImageTensor:
    tensor = torch.from_numpy(array.copy()).permute(2, 0, 1).float() / 255.0
    if expected_shape is None:
        return tensor
    c, h, w = expected_shape
    if channels != c:
        raise ChannelMismatchError(f"{source} 的通道数为 {channels}，期望 {c}")
    if tensor.shape[-2:] != (h, w):
        # 双线性插值后裁剪回 [0, 1]
        tensor = F.interpolate(tensor[None], size=(h, w), mode="bilinear", align_corners=False)[0]
        tensor = tensor.clamp(0.0, 1.0)
    return tensor


def list_image_files(path: Union[str, Path]) -> List[Path]:
    """按文件名字典序列出目录中的图像文件"""
    path = Path(path)
    if not path.is_dir():
        raise DataPathError(f"目录不存在: {path}")
    files = sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise EmptyDatasetError(f"no images found: {path}")
    return files


def load_class_dir(path: Union[str, Path], expected_shape: Sequence[int]) -> List[ImageTensor]:
    """
    读取一个类别目录下的全部图像

    Args:
        path: 类别目录
        expected_shape: 期望形状 [C, H, W]，尺寸不符时缩放，通道不符时报错

    Returns:
        按文件名字典序排列的图像列表
    """
    path = Path(path)
    files = list_image_files(path)
    images = [load_image(f, expected_shape) for f in files]
    logger.debug(f"从 {path} 读取 {len(images)} 张图像")
    return images


def _to_pil(image: ImageTensor) -> Image.Image:
    array = (image.detach().double().clamp(0, 1) * 255.0).round().to(torch.uint8)
    array = array.permute(1, 2, 0).cpu().numpy()
    if array.shape[2] == 1:
        return Image.fromarray(array[:, :, 0], mode="L")
    return Image.fromarray(array, mode="RGB")


def save_image(image: ImageTensor, path: Union[str, Path]) -> Path:
    """以无损 PNG 保存 [C, H, W] 图像"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _to_pil(image).save(path, format="PNG")
    return path


def encode_png(image: ImageTensor) -> bytes:
    buffer = io.BytesIO()
    _to_pil(image).save(buffer, format="PNG")
    return buffer.getvalue()


def sample_auxiliary_set(
    class0: Sequence[ImageTensor],
    class1: Sequence[ImageTensor],
    n: int,
    target: Tuple[int, int],
    seed: int,
) -> AuxiliarySet:
    """
    采样类别均衡的辅助集，目标样本一定包含在内

    Args:
        class0 / class1: 两个类别的候选图像
        n: 辅助集大小（偶数）
        target: 目标样本 (类别, 下标)
        seed: 随机种子
    """
    if n < 2 or n % 2:
        raise InvalidAuxiliarySizeError(f"n 必须为不小于 2 的偶数，实际为 {n}")
    pools = [list(class0), list(class1)]
    half = n // 2
    for label, pool in enumerate(pools):
        if len(pool) < half:
            raise InsufficientImagesError(f"类别 {label} 只有 {len(pool)} 张图像，至少需要 {half} 张")

    target_class, target_idx = target
    if target_class not in (0, 1) or not 0 <= target_idx < len(pools[target_class]):
        raise InvalidTargetError(f"无效的目标样本引用: {target}")

    gen = make_generator(seed)
    chosen: List[List[int]] = []
    for label, pool in enumerate(pools):
        if label == target_class:
            others = [i for i in range(len(pool)) if i != target_idx]
            order = torch.randperm(len(others), generator=gen).tolist()
            picked = [target_idx] + [others[j] for j in order[:half - 1]]
        else:
            picked = torch.randperm(len(pool), generator=gen)[:half].tolist()
        chosen.append(sorted(picked))

    examples: List[LabeledImage] = []
    sources: List[Tuple[int, int]] = []
    target_index = -1
    for label, picked in enumerate(chosen):
        for idx in picked:
            if (label, idx) == (target_class, target_idx):
                target_index = len(examples)
            examples.append(LabeledImage(image=pools[label][idx], label=label))
            sources.append((label, idx))

    return AuxiliarySet(examples=examples, target_index=target_index, sources=sources)


def sample_prototype_bank(aux: AuxiliarySet, K: int, seed: int) -> PrototypeBank:
    """
    为 K 个解码器采样原型对

    原型对数量足够时不放回采样（各对互不相同），否则有放回采样。
    """
    if K < 1:
        raise ValueError("K 必须不小于 1")
    idx0, idx1 = aux.indices_of(0), aux.indices_of(1)
    total = len(idx0) * len(idx1)
    gen = make_generator(seed)
    if K <= total:
        flat = torch.randperm(total, generator=gen)[:K].tolist()
    else:
        logger.warning(f"可用原型对只有 {total} 个，{K} 个解码器将有放回采样")
        flat = torch.randint(total, (K,), generator=gen).tolist()
    pairs = [(idx0[f // len(idx1)], idx1[f % len(idx1)]) for f in flat]
    return PrototypeBank.from_indices(aux, pairs)


# ==================== 玩具数据集 ====================

def _render_toy_image(label: int, size: int, channels: int, gen: torch.Generator) -> ImageTensor:
    """类别 0 为圆盘，类别 1 为方块；颜色、位置、大小、背景随机"""
    coords = torch.arange(size, dtype=torch.float32)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")

    theta = float(torch.rand(1, generator=gen)) * 2 * math.pi
    ramp = (math.cos(theta) * xx + math.sin(theta) * yy) / size
    ramp = (ramp - ramp.min()) / (ramp.max() - ramp.min() + 1e-8)
    c_a = torch.rand(channels, generator=gen) * 0.45
    c_b = torch.rand(channels, generator=gen) * 0.45
    background = c_a[:, None, None] * (1 - ramp) + c_b[:, None, None] * ramp
    background = background + 0.04 * torch.randn(channels, size, size, generator=gen)

    fg = 0.55 + 0.45 * torch.rand(channels, generator=gen)
    cx, cy = (0.3 + 0.4 * torch.rand(2, generator=gen)) * size
    radius = (0.16 + 0.14 * float(torch.rand(1, generator=gen))) * size
    if label == 0:
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    else:
        half = radius * 0.85
        mask = ((xx - cx).abs() <= half) & ((yy - cy).abs() <= half)

    image = torch.where(mask[None], fg[:, None, None].expand(-1, size, size), background)
    return image.clamp(0.0, 1.0)


def make_toy_dataset(
    root: Union[str, Path],
    per_class: int,
    image_size: int = 32,
    channels: int = 3,
    seed: int = 0,
    classes: Tuple[str, str] = ("class0", "class1"),
) -> Path:
    """在 <root>/<class>/ 下生成确定性的两类 PNG 玩具数据"""
    root = Path(root)
    for label, name in enumerate(classes):
        gen = make_generator(derive_seed(seed, "toy", label))
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            save_image(_render_toy_image(label, image_size, channels, gen), class_dir / f"{i:05d}.png")
    logger.info(f"玩具数据集已生成: {root}（每类 {per_class} 张，{channels}x{image_size}x{image_size}）")
    return root


def load_labeled_dir(
    root: Union[str, Path],
    classes: Sequence[str],
    expected_shape: Sequence[int],
) -> Tuple[List[List[ImageTensor]], List[Path]]:
    """读取两个类别目录，返回 ([类别0图像, 类别1图像], 类别目录)"""
    root = Path(root)
    dirs = [root / name for name in classes]
    return [load_class_dir(d, expected_shape) for d in dirs], dirs
