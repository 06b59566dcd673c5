"""
图像变换 - 旋转、2x2 拼图打乱（"混沌"变换 T(·)）以及有监督基线的数据增强

约定：
- 旋转方向为逆时针；
- 拼图的图块按行优先编号 (左上, 右上, 左下, 右下) = (0, 1, 2, 3)，
  输出第 i 个位置放置输入的第 permutation[i] 个图块。
"""
from itertools import permutations as _permutations
from typing import Any, Dict, List, Sequence, Tuple

import torch
import torch.nn.functional as F

from nobox.core.exceptions import TransformError
from nobox.core.reproducibility import make_generator
from nobox.models.schemas import ImageTensor, Mechanism

ANGLES: Tuple[int, ...] = (0, 90, 180, 270)
PERMUTATIONS: Tuple[Tuple[int, ...], ...] = tuple(_permutations(range(4)))


def rotate(image: ImageTensor, angle: int) -> ImageTensor:
    """逆时针旋转 angle 度（0 / 90 / 180 / 270）"""
    if angle not in ANGLES:
        raise TransformError(f"不支持的旋转角度: {angle}")
    h, w = image.shape[-2:]
    if angle in (90, 270) and h != w:
        raise TransformError(f"非方形图像 ({h}x{w}) 不能旋转 {angle} 度")
    return torch.rot90(image, k=angle // 90, dims=(-2, -1))


def _check_permutation(permutation: Sequence[int]) -> Tuple[int, ...]:
    perm = tuple(int(p) for p in permutation)
    if sorted(perm) != [0, 1, 2, 3]:
        raise TransformError(f"拼图排列必须是 {{0,1,2,3}} 上的双射: {list(permutation)}")
    return perm


def inverse_permutation(permutation: Sequence[int]) -> Tuple[int, ...]:
    """求逆排列"""
    perm = _check_permutation(permutation)
    inverse = [0] * 4
    for i, p in enumerate(perm):
        inverse[p] = i
    return tuple(inverse)


def _tiles(image: ImageTensor) -> List[torch.Tensor]:
    h, w = image.shape[-2:]
    if h % 2 or w % 2:
        raise TransformError(f"拼图要求高宽为偶数，实际为 {h}x{w}")
    hh, hw = h // 2, w // 2
    return [
        image[..., :hh, :hw], image[..., :hh, hw:],
        image[..., hh:, :hw], image[..., hh:, hw:],
    ]


def jigsaw(image: ImageTensor, permutation: Sequence[int]) -> ImageTensor:
    """按排列重排 2x2 图块"""
    perm = _check_permutation(permutation)
    tiles = _tiles(image)
    ordered = [tiles[p] for p in perm]
    top = torch.cat([ordered[0], ordered[1]], dim=-1)
    bottom = torch.cat([ordered[2], ordered[3]], dim=-1)
    return torch.cat([top, bottom], dim=-2)


def sample_transform(mechanism: Mechanism, generator: torch.Generator) -> Dict[str, Any]:
    """按机制均匀采样一个变换，返回描述符"""
    mechanism = Mechanism(mechanism)
    if mechanism == Mechanism.ROTATION:
        idx = int(torch.randint(len(ANGLES), (1,), generator=generator))
        return {"mechanism": mechanism.value, "angle": ANGLES[idx]}
    if mechanism == Mechanism.JIGSAW:
        idx = int(torch.randint(len(PERMUTATIONS), (1,), generator=generator))
        return {"mechanism": mechanism.value, "permutation": list(PERMUTATIONS[idx])}
    raise TransformError(f"机制 {mechanism.value} 没有对应的混沌变换")


def apply_transform(image: ImageTensor, descriptor: Dict[str, Any]) -> ImageTensor:
    """按描述符执行变换"""
    if descriptor["mechanism"] == Mechanism.ROTATION.value:
        return rotate(image, descriptor["angle"])
    if descriptor["mechanism"] == Mechanism.JIGSAW.value:
        return jigsaw(image, descriptor["permutation"])
    if descriptor["mechanism"] == "identity":
        return image
    raise TransformError(f"未知的变换描述符: {descriptor}")


def chaos_transform(
    image: ImageTensor,
    mechanism: Mechanism,
    seed: int,
) -> Tuple[ImageTensor, Dict[str, Any]]:
    """
    混沌变换 T(x)

    Returns:
        (变换后的图像, 变换描述符)
    """
    descriptor = sample_transform(mechanism, make_generator(seed))
    return apply_transform(image, descriptor), descriptor


def chaos_transform_batch(
    images: torch.Tensor,
    mechanism: Mechanism,
    generator: torch.Generator,
) -> Tuple[torch.Tensor, List[Dict[str, Any]]]:
    """对 [B, C, H, W] 中每张图像独立采样变换（训练时每次迭代重新采样）"""
    descriptors = [sample_transform(mechanism, generator) for _ in range(images.shape[0])]
    transformed = torch.stack([apply_transform(img, d) for img, d in zip(images, descriptors)])
    return transformed, descriptors


def augment_batch(
    images: torch.Tensor,
    generator: torch.Generator,
    padding: int = 4,
) -> torch.Tensor:
    """随机水平翻转 + 零填充随机裁剪"""
    b, _, h, w = images.shape
    flips = torch.rand(b, generator=generator) < 0.5
    out = torch.where(flips[:, None, None, None], images.flip(-1), images)
    if padding <= 0:
        return out
    padded = F.pad(out, (padding, padding, padding, padding))
    offsets = torch.randint(0, 2 * padding + 1, (b, 2), generator=generator)
    crops = [
        padded[i, :, dy:dy + h, dx:dx + w]
        for i, (dy, dx) in enumerate(offsets.tolist())
    ]
    return torch.stack(crops)
