"""
玩具受害者模型库

三种结构互不相同的小型 CNN（深度 / 宽度 / 池化方式不同），在与辅助集不相交的玩具数据上训练，
用于桌面规模的迁移评估。攻击模块不得依赖本模块。
"""
from typing import Any, Dict, List, Literal, Protocol, Sequence, Tuple, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from pydantic import BaseModel, ConfigDict

from nobox.core.reproducibility import make_generator
from nobox.data.transforms import augment_batch

VictimArch = Literal["small_cnn", "wide_cnn", "deep_cnn"]


@runtime_checkable
class VictimClassifier(Protocol):
    """受害者分类器接口：predict 必须确定且无副作用"""
    name: str
    num_classes: int
    metadata: Dict[str, Any]

    def predict(self, batch: torch.Tensor) -> torch.Tensor:
        ...


@runtime_checkable
class VerificationModel(Protocol):
    """人脸验证风格接口：嵌入 + 余弦相似度"""

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        ...

    def similarity(self, a: torch.Tensor, b: torch.Tensor) -> float:
        ...


class VictimSpec(BaseModel):
    """受害者模型规格"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    arch: VictimArch
    input_shape: Tuple[int, int, int]
    num_classes: int = 2
    seed: int = 0
    train_set: str = ""


class VictimNet(nn.Module):
    """受害者网络：features() 给出倒数第二层嵌入"""

    KIND = "victim"

    def __init__(self, spec: VictimSpec):
        super().__init__()
        self.spec = spec
        c, _, _ = spec.input_shape
        if spec.arch == "small_cnn":
            self.body = nn.Sequential(
                nn.Conv2d(c, 16, 3, padding=1), nn.ReLU(True), nn.MaxPool2d(2),
                nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(True), nn.MaxPool2d(2),
                nn.AdaptiveAvgPool2d(2), nn.Flatten(),
            )
            dim = 32 * 4
        elif spec.arch == "wide_cnn":
            self.body = nn.Sequential(
                nn.Conv2d(c, 64, 5, padding=2), nn.ReLU(True), nn.AvgPool2d(2),
                nn.Conv2d(64, 128, 3, padding=1), nn.ReLU(True), nn.AvgPool2d(2),
                nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            )
            dim = 128
        else:
            layers: List[nn.Module] = []
            widths = [c, 24, 32, 48, 64]
            for i in range(4):
                layers += [
                    nn.Conv2d(widths[i], widths[i + 1], 3, stride=2 if i % 2 else 1, padding=1),
                    nn.BatchNorm2d(widths[i + 1]),
                    nn.ReLU(True),
                ]
            layers += [nn.AdaptiveMaxPool2d(1), nn.Flatten()]
            self.body = nn.Sequential(*layers)
            dim = 64
        self.fc = nn.Sequential(nn.Linear(dim, 64), nn.ReLU(True))
        self.classifier = nn.Linear(64, spec.num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.body(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))


class TorchVictim:
    """把 VictimNet 包装为 VictimClassifier"""

    def __init__(self, net: VictimNet, name: str = ""):
        self.net = net.eval()
        self.name = name or net.spec.arch
        self.num_classes = net.spec.num_classes
        self.metadata = {
            "arch": net.spec.arch,
            "train_set": net.spec.train_set,
            "seed": net.spec.seed,
            "input_shape": list(net.spec.input_shape),
        }

    @torch.no_grad()
    def predict(self, batch: torch.Tensor) -> torch.Tensor:
        if batch.dim() == 3:
            batch = batch.unsqueeze(0)
        return self.net(batch.float()).argmax(dim=-1)

    @torch.no_grad()
    def embed(self, image: torch.Tensor) -> torch.Tensor:
        single = image.dim() == 3
        feats = self.net.features((image.unsqueeze(0) if single else image).float())
        return feats[0] if single else feats


class EmbeddingVerifier:
    """基于受害者倒数第二层特征的验证模型"""

    def __init__(self, victim: TorchVictim):
        self.victim = victim
        self.name = victim.name

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        return self.victim.embed(image)

    def similarity(self, a: torch.Tensor, b: torch.Tensor) -> float:
        return float(F.cosine_similarity(a.double().flatten(), b.double().flatten(), dim=0, eps=1e-12))


def build_victim(spec: VictimSpec) -> VictimNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        net = VictimNet(spec)
    return net


def train_victim(
    spec: VictimSpec,
    class_images: Sequence[Sequence[torch.Tensor]],
    epochs: int = 30,
    learning_rate: float = 1e-3,
    batch_size: int = 32,
) -> TorchVictim:
    """
    在玩具数据上训练受害者模型

    Args:
        spec: 受害者规格
        class_images: [类别0图像列表, 类别1图像列表]
        epochs: 训练轮数
    """
    images = torch.stack([img for imgs in class_images for img in imgs])
    labels = torch.tensor([y for y, imgs in enumerate(class_images) for _ in imgs], dtype=torch.long)
    net = build_victim(spec)
    optimizer = torch.optim.Adam(net.parameters(), lr=learning_rate)
    gen = make_generator(spec.seed)

    net.train()
    for epoch in range(epochs):
        order = torch.randperm(len(images), generator=gen)
        total_loss = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = augment_batch(images[idx], gen, padding=2)
            loss = F.cross_entropy(net(batch), labels[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += float(loss) * len(idx)
        logger.debug(f"受害者 {spec.arch} epoch {epoch + 1}/{epochs} loss={total_loss / len(images):.4f}")
    net.eval()

    victim = TorchVictim(net)
    with torch.no_grad():
        acc = float((victim.predict(images) == labels).float().mean())
    logger.info(f"受害者 {spec.arch} 训练完成，训练集准确率 {acc:.2%}")
    return victim

