"""
数据模型和Schema定义

张量类数据（图像、辅助集、原型库）用 dataclass，
配置与报告类数据用 pydantic（需要校验与序列化）。
"""
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from nobox.core.reproducibility import config_hash

# [C, H, W]，取值范围 [0, 1]
ImageTensor = torch.Tensor
CodeTensor = torch.Tensor

MAX_AUXILIARY_SIZE = 40


class Mechanism(str, Enum):
    """替代模型训练机制"""
    ROTATION = "rotation"
    JIGSAW = "jigsaw"
    PROTOTYPICAL = "prototypical"
    NAIVE_AE = "naive_ae"
    NAIVE_SUPERVISED = "naive_supervised"


CHAOS_MECHANISMS = (Mechanism.ROTATION, Mechanism.JIGSAW)

# 报告中的行顺序：先无监督，再有监督
MECHANISM_ORDER = [
    Mechanism.NAIVE_AE,
    Mechanism.JIGSAW,
    Mechanism.ROTATION,
    Mechanism.NAIVE_SUPERVISED,
    Mechanism.PROTOTYPICAL,
]


class NormKind(str, Enum):
    """扰动范数"""
    LINF = "linf"
    L2 = "l2"


class BaselineKind(str, Enum):
    """ILA 之前的基线攻击"""
    IFGSM = "ifgsm"
    PGD = "pgd"
    NONE = "none"


class LossKind(str, Enum):
    """对抗损失的相似度度量"""
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"


# ==================== 图像与辅助集 ====================

@dataclass(frozen=True)
class LabeledImage:
    """带标签的图像"""
    image: ImageTensor
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"标签必须为 0 或 1，实际为 {self.label}")


@dataclass
class AuxiliarySet:
    """
    辅助数据集 {(x_i, y_i)}

    sources 记录每个样本在原始类别列表中的位置 (class_id, index)，
    用于把辅助集写入运行清单并在生成阶段重建。
    """
    examples: List[LabeledImage]
    target_index: int
    sources: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.examples)
        if not 2 <= n <= MAX_AUXILIARY_SIZE:
            raise ValueError(f"辅助集大小必须在 [2, {MAX_AUXILIARY_SIZE}] 之间，实际为 {n}")
        if {ex.label for ex in self.examples} != {0, 1}:
            raise ValueError("辅助集必须同时包含两个类别")
        if not 0 <= self.target_index < n:
            raise ValueError(f"target_index 越界: {self.target_index}")
        shape = self.examples[0].image.shape
        if any(ex.image.shape != shape for ex in self.examples):
            raise ValueError("辅助集中所有图像的形状必须一致")

    @property
    def n(self) -> int:
        return len(self.examples)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.examples[0].image.shape)

    @property
    def target(self) -> LabeledImage:
        return self.examples[self.target_index]

    def images(self) -> torch.Tensor:
        """堆叠为 [n, C, H, W]"""
        return torch.stack([ex.image for ex in self.examples])

    def labels(self) -> torch.Tensor:
        return torch.tensor([ex.label for ex in self.examples], dtype=torch.long)

    def indices_of(self, label: int) -> List[int]:
        return [i for i, ex in enumerate(self.examples) if ex.label == label]


@dataclass
class PrototypeBank:
    """
    原型库：每个解码器 k 对应一对原型 (x_k^(0), x_k^(1))

    indices 保存原型在辅助集中的下标，prototypes 保存对应图像。
    """
    indices: List[Tuple[int, int]]
    prototypes: List[Tuple[ImageTensor, ImageTensor]]

    def __post_init__(self):
        if not self.indices:
            raise ValueError("原型库至少包含一对原型")
        if len(self.indices) != len(self.prototypes):
            raise ValueError("indices 与 prototypes 长度不一致")

    @property
    def K(self) -> int:
        return len(self.prototypes)

    def stacked(self, label: int) -> torch.Tensor:
        """类别 label 的原型，堆叠为 [K, C, H, W]"""
        return torch.stack([pair[label] for pair in self.prototypes])

    @classmethod
    def from_indices(cls, aux: AuxiliarySet, indices: List[Tuple[int, int]]) -> "PrototypeBank":
        prototypes = []
        for i0, i1 in indices:
            if aux.examples[i0].label != 0 or aux.examples[i1].label != 1:
                raise ValueError(f"原型对 ({i0}, {i1}) 的类别与约定不符")
            prototypes.append((aux.examples[i0].image, aux.examples[i1].image))
        return cls(indices=list(indices), prototypes=prototypes)


@dataclass
class GuideSet:
    """
    对抗损失的正负原型

    decoder_positives 仅在多解码器原型模型中使用：第 k 个解码器的正原型为 x_k^(y)。
    """
    positive: ImageTensor
    negatives: List[ImageTensor]
    decoder_positives: Optional[List[ImageTensor]] = None

    def positive_for(self, k: int) -> ImageTensor:
        if self.decoder_positives is not None:
            return self.decoder_positives[k]
        return self.positive


# ==================== 模型与训练配置 ====================

class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)


class ModelSpec(_Frozen):
    """替代模型规格"""
    input_shape: Tuple[int, int, int]
    base_width: int = Field(16, ge=8)
    num_residual_blocks: int = Field(4, ge=1)
    num_decoders: int = Field(1, ge=1, alias="K")
    embedding_tap: Literal["up1", "up2"] = "up2"
    seed: int = 0

    @field_validator("input_shape")
    @classmethod
    def _check_shape(cls, value):
        c, h, w = value
        if c not in (1, 3):
            raise ValueError("通道数必须为 1 或 3")
        if h <= 0 or w <= 0:
            raise ValueError("高宽必须为正数")
        return value

    def spec_hash(self) -> str:
        return config_hash(self)


class TrainConfig(_Frozen):
    """替代模型训练配置"""
    mechanism: Mechanism
    max_iterations: int = Field(15000, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    batch: Optional[int] = Field(None, ge=1)  # None 表示全批量
    seed: int = 0
    plateau_patience: int = Field(10, ge=1)
    plateau_tolerance: float = Field(1e-4, ge=0)
    check_interval: int = Field(100, ge=1)
    smoothing: float = Field(0.99, ge=0, lt=1)
    # 以下仅用于 naive_supervised
    weight_decay: float = Field(5e-4, ge=0)
    augment: bool = True
    crop_padding: int = Field(4, ge=0)


@dataclass
class TrainLog:
    """训练日志"""
    losses: List[float] = field(default_factory=list)
    accuracy_iterations: List[int] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    stopped_at: int = 0
    best_iteration: int = 0
    best_smoothed_loss: float = float("inf")
    prototype_indices: List[Tuple[int, int]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "iteration": range(1, len(self.losses) + 1),
            "loss": self.losses,
        })
        if self.train_accuracy:
            acc = pd.Series(self.train_accuracy, index=self.accuracy_iterations, name="train_acc")
            frame = frame.join(acc, on="iteration")
        return frame

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    @classmethod
    def from_csv(cls, path: Path) -> "TrainLog":
        frame = pd.read_csv(path)
        log = cls(losses=frame["loss"].astype(float).tolist(), stopped_at=len(frame))
        if "train_acc" in frame.columns:
            acc = frame.dropna(subset=["train_acc"])
            log.accuracy_iterations = acc["iteration"].astype(int).tolist()
            log.train_accuracy = acc["train_acc"].astype(float).tolist()
        return log


# ==================== 攻击配置 ====================

class Budget(_Frozen):
    """扰动预算"""
    norm: NormKind = NormKind.LINF
    epsilon: float = Field(0.1, ge=0)  # ε=0 作为退化预算允许
    step_size: float = Field(1 / 255, gt=0)


class AttackConfig(_Frozen):
    """攻击配置"""
    budget: Budget = Budget()
    baseline: BaselineKind = BaselineKind.IFGSM
    baseline_iters: int = Field(200, ge=0)
    ila_iters: int = Field(100, ge=0)
    lambda_: float = Field(1.0, gt=0, alias="lambda")
    num_negatives: Optional[int] = Field(None, ge=1)  # None 表示按机制取默认值
    loss_kind: LossKind = LossKind.EUCLIDEAN
    seed: int = 0

    def config_hash(self) -> str:
        return config_hash(self)


class CraftRecord(BaseModel):
    """单个对抗样本的生成记录（写入 sidecar JSON）"""
    model_config = ConfigDict(populate_by_name=True)

    target_id: str = ""
    mechanism: str = ""
    label: int
    config_hash: str
    seed: int
    norm: NormKind
    epsilon: float
    step_size: float
    baseline: BaselineKind
    baseline_iters: int
    ila_iters: int
    lambda_: float = Field(alias="lambda")
    loss_kind: LossKind
    num_negatives: int
    baseline_loss_start: Optional[float] = None
    baseline_loss_final: Optional[float] = None
    ila_objective_final: Optional[float] = None
    ila_fallback: bool = False
    linf_distance: float = 0.0
    l2_distance: float = 0.0
    source_image: Optional[str] = None
    extra: Dict[str, Any] = Field(default_factory=dict)


# ==================== 评估 ====================

class EvalReport(BaseModel):
    """受害者模型准确率报告"""
    method: str = ""
    accuracy: Dict[str, float] = Field(default_factory=dict)
    correct: Dict[str, int] = Field(default_factory=dict)
    total: Dict[str, int] = Field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0
    complete: bool = True
    failed_items: List[int] = Field(default_factory=list)
    num_decoders: int = 1
    n: Optional[int] = None

    @model_validator(mode="after")
    def _check_accuracy(self):
        for name, acc in self.accuracy.items():
            total = self.total.get(name, 0)
            expected = self.correct.get(name, 0) / total if total else 0.0
            if acc != expected:
                raise ValueError(f"{name} 的准确率 {acc} 与 correct/total={expected} 不一致")
        return self

    @property
    def average(self) -> float:
        if not self.accuracy:
            return float("nan")
        return sum(self.accuracy.values()) / len(self.accuracy)

    def add(self, victim: str, correct: int, total: int):
        self.correct[victim] = int(correct)
        self.total[victim] = int(total)
        self.accuracy[victim] = correct / total if total else 0.0


class RocCurve(BaseModel):
    """ROC 曲线，thresholds 降序排列，tpr / fpr 沿该顺序单调不减"""
    thresholds: List[float]
    tpr: List[float]
    fpr: List[float]
    auc: float = Field(ge=0.0, le=1.0)


# ==================== 运行配置 ====================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class DataSection(_Section):
    root: str = "./data/toy/aux"
    classes: Tuple[str, str] = ("class0", "class1")
    image_shape: Tuple[int, int, int] = (3, 32, 32)


class ModelSection(_Section):
    base_width: int = Field(16, ge=8)
    num_residual_blocks: int = Field(4, ge=1)
    num_decoders: int = Field(1, ge=1, alias="K")
    embedding_tap: Literal["up1", "up2"] = "up2"
    classifier_arch: Literal["vgg", "resnet"] = "vgg"


class TrainSection(_Section):
    max_iterations: int = Field(15000, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    plateau_patience: int = Field(10, ge=1)
    plateau_tolerance: float = Field(1e-4, ge=0)
    check_interval: int = Field(100, ge=1)


class AttackSection(_Section):
    norm: NormKind = NormKind.LINF
    epsilon: float = Field(0.1, ge=0)
    step_size: float = Field(1 / 255, gt=0)
    baseline: BaselineKind = BaselineKind.IFGSM
    baseline_iters: int = Field(200, ge=0)
    ila_iters: int = Field(100, ge=0)
    lambda_: float = Field(1.0, gt=0, alias="lambda")
    num_negatives: Optional[int] = Field(None, ge=1)
    loss_kind: LossKind = LossKind.EUCLIDEAN


class SeedSection(_Section):
    data: int = 0
    model: int = 0
    attack: int = 0


class TargetSection(_Section):
    count: int = Field(10, ge=1)


class VictimSection(_Section):
    root: str = "./data/toy/victim"
    checkpoint_dir: str = "./data/victims"
    architectures: List[Literal["small_cnn", "wide_cnn", "deep_cnn"]] = ["small_cnn", "wide_cnn", "deep_cnn"]
    epochs: int = Field(30, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    seed: int = 0


class EvaluationSection(_Section):
    verification: bool = False


class RemoteSection(_Section):
    enabled: bool = False
    endpoint: Optional[str] = None
    rate_limit: float = Field(2.0, gt=0)
    max_retries: int = Field(3, ge=0)
    backoff: float = Field(1.0, ge=0)
    timeout: float = Field(30.0, gt=0)

    @model_validator(mode="after")
    def _check_endpoint(self):
        if self.enabled and not self.endpoint:
            raise ValueError("启用远程评估时必须提供 endpoint")
        return self


class RunConfig(_Section):
    """一次实验的完整配置"""
    version: Literal[1] = 1
    name: str = "run"
    mechanism: Mechanism = Mechanism.PROTOTYPICAL
    n: int = Field(20, ge=2, le=MAX_AUXILIARY_SIZE)
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    attack: AttackSection = AttackSection()
    seeds: SeedSection = SeedSection()
    targets: TargetSection = TargetSection()
    victims: VictimSection = VictimSection()
    evaluation: EvaluationSection = EvaluationSection()
    remote: RemoteSection = RemoteSection()
    workers: int = Field(1, ge=1)
    output_root: str = "./runs"

    @field_validator("n")
    @classmethod
    def _check_even(cls, value):
        if value % 2:
            raise ValueError("n 必须为偶数（两类样本数相等）")
        return value

    @model_validator(mode="after")
    def _check_mechanism(self):
        if self.mechanism != Mechanism.PROTOTYPICAL and self.model.num_decoders != 1:
            raise ValueError(
                f"model.K: 机制 {self.mechanism.value} 只支持单解码器，实际为 {self.model.num_decoders}"
            )
        return self

    def config_hash(self) -> str:
        return config_hash(self)

    def model_spec(self, seed: int) -> ModelSpec:
        return ModelSpec(
            input_shape=self.data.image_shape,
            base_width=self.model.base_width,
            num_residual_blocks=self.model.num_residual_blocks,
            num_decoders=self.model.num_decoders,
            embedding_tap=self.model.embedding_tap,
            seed=seed,
        )

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            mechanism=self.mechanism,
            max_iterations=self.train.max_iterations,
            learning_rate=self.train.learning_rate,
            seed=seed,
            plateau_patience=self.train.plateau_patience,
            plateau_tolerance=self.train.plateau_tolerance,
            check_interval=self.train.check_interval,
        )

    def attack_config(self, seed: int) -> AttackConfig:
        a = self.attack
        return AttackConfig(
            budget=Budget(norm=a.norm, epsilon=a.epsilon, step_size=a.step_size),
            baseline=a.baseline,
            baseline_iters=a.baseline_iters,
            ila_iters=a.ila_iters,
            lambda_=a.lambda_,
            num_negatives=a.num_negatives,
            loss_kind=a.loss_kind,
            seed=seed,
        )

    @property
    def method_label(self) -> str:
        """报告中的方法名，多解码器原型模型带上解码器数"""
        if self.mechanism == Mechanism.PROTOTYPICAL and self.model.num_decoders > 1:
            return f"prototypical (K={self.model.num_decoders})"
        return self.mechanism.value


@dataclass(frozen=True)
class RunLayout:
    """一次运行的目录结构"""
    root: Path

    @property
    def config_path(self) -> Path:
        return self.root / "config.yaml"

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def adversarial_dir(self) -> Path:
        return self.root / "adversarial"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"

    @property
    def report_json(self) -> Path:
        return self.eval_dir / "report.json"

    @property
    def report_csv(self) -> Path:
        return self.eval_dir / "report.csv"

    def target_dir(self, target_id: str) -> Path:
        return self.root / "targets" / target_id

    def checkpoint(self, target_id: str) -> Path:
        return self.target_dir(target_id) / "substitute.pt"

    def train_log(self, target_id: str) -> Path:
        return self.target_dir(target_id) / "train_log.csv"

    def train_logs(self) -> List[Path]:
        return sorted((self.root / "targets").glob("*/train_log.csv"))


class RunManifest(BaseModel):
    """运行清单，timings 与 created_at 不参与内容哈希"""
    config_hash: str
    tool_version: str
    targets: Dict[str, Dict[str, str]] = Field(default_factory=dict)
    artifacts: Dict[str, str] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    created_at: str = ""

    def content_hash(self) -> str:
        return config_hash(self.model_dump(mode="json", exclude={"timings", "created_at"}))
