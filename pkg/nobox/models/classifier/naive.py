"""
有监督基线替代模型（naive_supervised）

在辅助集上用交叉熵训练的小型 softmax CNN，提供 VGG 风格与 ResNet 风格两种结构。
encode() 返回中间层特征，供 ILA 使用。
"""
from typing import Literal, Tuple

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field

from nobox.core.exceptions import ShapeMismatchError


class ClassifierSpec(BaseModel):
    """分类器规格"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    input_shape: Tuple[int, int, int]
    arch: Literal["vgg", "resnet"] = "vgg"
    base_width: int = Field(16, ge=8)
    dropout: float = Field(0.5, ge=0, lt=1)
    num_classes: int = 2
    seed: int = 0


def _vgg_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
        nn.ReLU(True),
        nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
        nn.ReLU(True),
        nn.MaxPool2d(2),
    )


class BasicBlock(nn.Module):
    """ResNet 基本残差块"""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
        )
        self.shortcut = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        self.relu = nn.ReLU(True)

    def forward(self, x):
        return self.relu(self.body(x) + self.shortcut(x))


class NaiveClassifier(nn.Module):
    """两类 softmax 分类器"""

    KIND = "classifier"

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        c, _, _ = spec.input_shape
        w = spec.base_width
        self.spec = spec
        if spec.arch == "vgg":
            self.stage1 = _vgg_block(c, w)
            self.stage2 = _vgg_block(w, w * 2)
            self.stage3 = _vgg_block(w * 2, w * 4)
        else:
            self.stage1 = nn.Sequential(
                nn.Conv2d(c, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(True),
                BasicBlock(w, w),
            )
            self.stage2 = BasicBlock(w, w * 2, stride=2)
            self.stage3 = BasicBlock(w * 2, w * 4, stride=2)
        self.head = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Dropout(spec.dropout),
            nn.Linear(w * 4, w * 4),
            nn.ReLU(True),
            nn.Dropout(spec.dropout),
            nn.Linear(w * 4, spec.num_classes),
        )

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.spec.input_shape)

    def _check_input(self, x: torch.Tensor):
        if x.dim() not in (3, 4) or tuple(x.shape[-3:]) != self.input_shape:
            raise ShapeMismatchError(f"输入形状 {tuple(x.shape)} 与模型输入 {self.input_shape} 不一致")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """中间层特征（第二阶段输出）"""
        self._check_input(x)
        single = x.dim() == 3
        feats = self.stage2(self.stage1(x.unsqueeze(0) if single else x))
        return feats[0] if single else feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        single = x.dim() == 3
        batch = x.unsqueeze(0) if single else x
        logits = self.head(self.stage3(self.stage2(self.stage1(batch))))
        return logits[0] if single else logits

    @torch.no_grad()
    def predict(self, x: torch.Tensor) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            return self(x).argmax(dim=-1)
        finally:
            self.train(was_training)


def build_classifier(spec: ClassifierSpec) -> NaiveClassifier:
    """按规格构建分类器，参数由 spec.seed 确定性初始化"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        model = NaiveClassifier(spec)
    return model.eval()
