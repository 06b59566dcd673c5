"""
自编码替代模型

一个共享编码器 + K 个解码器，结构取自 CycleGAN 的 ResNet 生成器并按玩具规模缩小：
7x7 卷积 → 2 次步长 2 下采样 → 瓶颈残差块 → 2 次转置卷积上采样 → 7x7 卷积 → Sigmoid。
编码器输出（瓶颈残差块之后）即 ILA 的特征抽头；解码器最后一个上采样块的输出为嵌入抽头。
"""
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
from torch.nn.utils import parameters_to_vector

from nobox.core.exceptions import DecoderIndexError, ShapeMismatchError
from nobox.models.schemas import CodeTensor, ImageTensor, ModelSpec

DOWNSAMPLE_FACTOR = 4
MIN_BOTTLENECK = 2


class ResnetBlock(nn.Module):
    """瓶颈处的残差块"""

    def __init__(self, dim: int):
        super().__init__()
        self.conv_block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3),
            nn.InstanceNorm2d(dim),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, kernel_size=3),
            nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.conv_block(x)


class Encoder(nn.Module):
    """共享编码器 Enc(·)"""

    def __init__(self, in_channels: int, base_width: int, num_residual_blocks: int):
        super().__init__()
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, base_width, kernel_size=7),
            nn.InstanceNorm2d(base_width),
            nn.ReLU(True),
        ]
        width = base_width
        for _ in range(2):
            layers += [
                nn.Conv2d(width, width * 2, kernel_size=3, stride=2, padding=1),
                nn.InstanceNorm2d(width * 2),
                nn.ReLU(True),
            ]
            width *= 2
        layers += [ResnetBlock(width) for _ in range(num_residual_blocks)]
        self.model = nn.Sequential(*layers)
        self.out_channels = width

    def forward(self, x):
        return self.model(x)


def _up_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_channels, out_channels, kernel_size=3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(out_channels),
        nn.ReLU(True),
    )


class Decoder(nn.Module):
    """解码器 Dec_k(·)，输出经 Sigmoid 限制在 [0, 1]"""

    TAPS = ("up1", "up2")

    def __init__(self, code_channels: int, base_width: int, out_channels: int):
        super().__init__()
        self.up1 = _up_block(code_channels, code_channels // 2)
        self.up2 = _up_block(code_channels // 2, base_width)
        self.head = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(base_width, out_channels, kernel_size=7),
        )
        self.out = nn.Sigmoid()

    def forward(self, code, tap: Optional[str] = None):
        h = self.up1(code)
        if tap == "up1":
            return h
        h = self.up2(h)
        if tap == "up2":
            return h
        return self.out(self.head(h))


def _as_batch(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    return x, False


class SubstituteModel(nn.Module):
    """替代模型：encode / decode / reconstruct / embedding"""

    KIND = "substitute"

    def __init__(self, spec: ModelSpec):
        super().__init__()
        c, _, _ = spec.input_shape
        self.spec = spec
        self.encoder = Encoder(c, spec.base_width, spec.num_residual_blocks)
        self.decoders = nn.ModuleList([
            Decoder(self.encoder.out_channels, spec.base_width, c)
            for _ in range(spec.num_decoders)
        ])

    @property
    def num_decoders(self) -> int:
        return len(self.decoders)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.spec.input_shape)

    def _check_input(self, x: torch.Tensor):
        if x.dim() not in (3, 4) or tuple(x.shape[-3:]) != self.input_shape:
            raise ShapeMismatchError(f"输入形状 {tuple(x.shape)} 与模型输入 {self.input_shape} 不一致")

    def _check_k(self, k: int):
        if not 0 <= k < self.num_decoders:
            raise DecoderIndexError(f"解码器下标 {k} 越界（共 {self.num_decoders} 个）")

    def encode(self, x: ImageTensor) -> CodeTensor:
        self._check_input(x)
        batch, single = _as_batch(x)
        code = self.encoder(batch)
        return code[0] if single else code

    def decode(self, code: CodeTensor, k: int = 0) -> ImageTensor:
        self._check_k(k)
        batch, single = _as_batch(code)
        out = self.decoders[k](batch)
        return out[0] if single else out

    def reconstruct(self, x: ImageTensor, k: int = 0) -> ImageTensor:
        return self.decode(self.encode(x), k)

    def reconstruct_all(self, x: torch.Tensor) -> List[torch.Tensor]:
        """所有解码器的重建结果，编码只计算一次"""
        code = self.encode(x)
        return [self.decode(code, k) for k in range(self.num_decoders)]

    def embedding(self, x: ImageTensor, k: int = 0) -> torch.Tensor:
        """第 k 个解码器倒数第三层（嵌入抽头）的激活，展平"""
        self._check_k(k)
        batch, single = _as_batch(x)
        self._check_input(batch)
        feats = self.decoders[k](self.encoder(batch), tap=self.spec.embedding_tap)
        feats = feats.flatten(start_dim=1)
        return feats[0] if single else feats

    def forward(self, x):
        return self.reconstruct(x, 0)

    def parameter_vector(self) -> torch.Tensor:
        return parameters_to_vector(self.parameters()).detach().clone()


def build_model(spec: ModelSpec) -> SubstituteModel:
    """按规格构建替代模型，参数由 spec.seed 确定性初始化"""
    c, h, w = spec.input_shape
    if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
        raise ShapeMismatchError(f"输入尺寸 {h}x{w} 不能被总下采样步长 {DOWNSAMPLE_FACTOR} 整除")
    if min(h, w) // DOWNSAMPLE_FACTOR < MIN_BOTTLENECK:
        raise ShapeMismatchError(f"输入尺寸 {h}x{w} 过小，瓶颈至少需要 {MIN_BOTTLENECK}x{MIN_BOTTLENECK}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        model = SubstituteModel(spec)
    return model.eval()


def encode(model: SubstituteModel, x: ImageTensor) -> CodeTensor:
    return model.encode(x)


def decode(model: SubstituteModel, code: CodeTensor, k: int = 0) -> ImageTensor:
    return model.decode(code, k)


def embedding(model: SubstituteModel, x: ImageTensor, k: int = 0) -> torch.Tensor:
    return model.embedding(x, k)
