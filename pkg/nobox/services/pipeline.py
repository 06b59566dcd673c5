"""
实验流水线 - train → craft → eval → report

每个目标样本单独训练一个替代模型（各目标的种子由主种子派生，互相独立），
(训练, 生成) 单元通过 joblib 进程池并行；受害者评估按受害者顺序执行。
所有产物位于 <output_root>/<name>/ 下，并记录在 manifest.json 中。
"""
import asyncio
import json
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch.nn as nn
from joblib import Parallel, delayed
from loguru import logger

from nobox import __version__
from nobox.core.config import dump_run_config, settings
from nobox.core.exceptions import (
    DataPathError,
    EmptyEvaluationError,
    IncompleteReportError,
    NoBoxError,
    SpecMismatchError,
    VictimLoadError,
)
from nobox.core.reproducibility import derive_seed, file_sha256
from nobox.data.loader import (
    list_image_files,
    load_image,
    load_labeled_dir,
    make_toy_dataset,
    sample_auxiliary_set,
    sample_prototype_bank,
    save_image,
)
from nobox.models.autoencoder.substitute import build_model
from nobox.models.checkpoint import load_checkpoint, save_checkpoint
from nobox.models.classifier.naive import ClassifierSpec, build_classifier
from nobox.models.schemas import (
    AuxiliarySet,
    CraftRecord,
    EvalReport,
    ImageTensor,
    LabeledImage,
    Mechanism,
    PrototypeBank,
    RunConfig,
    RunLayout,
    RunManifest,
)
from nobox.models.victims.zoo import EmbeddingVerifier, TorchVictim, VictimSpec, train_victim
from nobox.services.attack import assert_feasible, craft, on_grid, quantize_perturbation
from nobox.services.evaluation import evaluate_victims, roc_curve
from nobox.services.remote_victim import remote_victim_eval
from nobox.services.report_generator import ReportGenerator, load_run
from nobox.services.training import train_substitute

Pool = List[List[ImageTensor]]


@dataclass(frozen=True)
class Target:
    """目标样本：在类别 class_id 的图像列表中的第 index 张"""
    ordinal: int
    class_id: int
    index: int

    @property
    def target_id(self) -> str:
        return f"t{self.ordinal:03d}_c{self.class_id}_{self.index:04d}"


@dataclass(frozen=True)
class TargetSeeds:
    data: int
    model: int
    attack: int


def run_layout(config: RunConfig) -> RunLayout:
    return RunLayout(Path(config.output_root) / config.name)


def select_targets(config: RunConfig) -> List[Target]:
    """两类交替取目标：(0, 0), (1, 0), (0, 1), (1, 1), ..."""
    return [Target(i, i % 2, i // 2) for i in range(config.targets.count)]


def target_seeds(config: RunConfig, target: Target) -> TargetSeeds:
    tid = target.target_id
    return TargetSeeds(
        data=derive_seed(config.seeds.data, "aux", tid),
        model=derive_seed(config.seeds.model, "model", tid),
        attack=derive_seed(config.seeds.attack, "attack", tid),
    )


def load_pool(config: RunConfig) -> Tuple[Pool, List[List[Path]]]:
    """读取攻击方可见的两类图像（辅助集从中采样）"""
    pool, dirs = load_labeled_dir(config.data.root, config.data.classes, config.data.image_shape)
    files = [list_image_files(d) for d in dirs]
    return pool, files


def _relative(layout: RunLayout, path: Path) -> str:
    return Path(path).resolve().relative_to(layout.root.resolve()).as_posix()


# ==================== 训练 ====================

def substitute_spec(config: RunConfig, seed: int):
    if config.mechanism == Mechanism.NAIVE_SUPERVISED:
        return ClassifierSpec(
            input_shape=config.data.image_shape,
            arch=config.model.classifier_arch,
            base_width=config.model.base_width,
            seed=seed,
        )
    return config.model_spec(seed)


def build_substitute(config: RunConfig, seed: int) -> nn.Module:
    spec = substitute_spec(config, seed)
    if isinstance(spec, ClassifierSpec):
        return build_classifier(spec)
    return build_model(spec)


def train_target(config: RunConfig, pool: Pool, target: Target) -> Dict[str, str]:
    """采样辅助集并训练该目标的替代模型，返回产物路径"""
    layout = run_layout(config)
    seeds = target_seeds(config, target)
    tid = target.target_id
    aux = sample_auxiliary_set(pool[0], pool[1], config.n, (target.class_id, target.index), seeds.data)

    bank = None
    if config.mechanism == Mechanism.PROTOTYPICAL:
        bank = sample_prototype_bank(aux, config.model.num_decoders, derive_seed(seeds.model, "prototypes"))
    model = build_substitute(config, seeds.model)
    model, log = train_substitute(model, aux, config.train_config(seeds.model), bank)

    extra = {
        "target_id": tid,
        "target": [target.class_id, target.index],
        "mechanism": config.mechanism.value,
        "config_hash": config.config_hash(),
        "aux_sources": [list(s) for s in aux.sources],
        "target_index": aux.target_index,
        "prototype_indices": [list(p) for p in bank.indices] if bank else [],
    }
    checkpoint = save_checkpoint(model, layout.checkpoint(tid), extra)
    train_log = log.to_csv(layout.train_log(tid))
    logger.info(f"[{tid}] 替代模型已保存: {checkpoint}")
    return {"checkpoint": _relative(layout, checkpoint), "train_log": _relative(layout, train_log)}


# ==================== 生成 ====================

def restore_auxiliary_set(pool: Pool, extra: Dict) -> Tuple[AuxiliarySet, Optional[PrototypeBank]]:
    """由检查点中记录的样本来源重建辅助集与原型库"""
    sources = [tuple(s) for s in extra["aux_sources"]]
    try:
        examples = [LabeledImage(image=pool[c][i], label=c) for c, i in sources]
    except IndexError as e:
        raise SpecMismatchError("检查点记录的辅助集样本在当前数据目录中不存在") from e
    aux = AuxiliarySet(examples=examples, target_index=int(extra["target_index"]), sources=sources)
    indices = [tuple(p) for p in extra.get("prototype_indices", [])]
    bank = PrototypeBank.from_indices(aux, indices) if indices else None
    return aux, bank


def craft_target(
    config: RunConfig,
    pool: Pool,
    files: List[List[Path]],
    target: Target,
    checkpoint: Optional[Path] = None,
) -> Dict[str, str]:
    """加载替代模型，生成对抗样本，量化后校验预算并写出 PNG + JSON"""
    layout = run_layout(config)
    seeds = target_seeds(config, target)
    tid = target.target_id
    checkpoint = Path(checkpoint or layout.checkpoint(tid))
    model, extra = load_checkpoint(checkpoint, expected_spec=substitute_spec(config, seeds.model))
    if extra.get("mechanism") != config.mechanism.value:
        raise SpecMismatchError(f"检查点机制 {extra.get('mechanism')} 与配置 {config.mechanism.value} 不一致")
    aux, bank = restore_auxiliary_set(pool, extra)

    attack_config = config.attack_config(seeds.attack)
    x_adv, record = craft(model, aux, attack_config, config.mechanism, bank, tid)

    x0_grid = on_grid(aux.target.image)
    x_saved = quantize_perturbation(aux.target.image, x_adv, attack_config.budget)
    assert_feasible(x0_grid, x_saved, attack_config.budget)

    delta = x_saved - x0_grid
    record.linf_distance = float(delta.abs().max())
    record.l2_distance = float(delta.norm())
    c, i = aux.sources[aux.target_index]
    record.source_image = str(files[c][i])

    png = save_image(x_saved, layout.adversarial_dir / f"{tid}.png")
    sidecar = layout.adversarial_dir / f"{tid}.json"
    sidecar.write_text(record.model_dump_json(by_alias=True, indent=2), encoding="utf-8")
    return {
        "adversarial": _relative(layout, png),
        "sidecar": _relative(layout, sidecar),
        "adversarial_sha256": file_sha256(png),
    }


def _train_and_craft(config: RunConfig, pool: Pool, files: List[List[Path]], target: Target) -> Tuple[str, Dict[str, str]]:
    artifacts = train_target(config, pool, target)
    artifacts.update(craft_target(config, pool, files, target))
    return target.target_id, artifacts


# ==================== 受害者 ====================

def load_or_train_victims(config: RunConfig) -> List[TorchVictim]:
    """从 checkpoint_dir 读取受害者，不存在时在受害者数据上训练并保存"""
    section = config.victims
    checkpoint_dir = Path(section.checkpoint_dir)
    victims: List[TorchVictim] = []
    for arch in section.architectures:
        spec = VictimSpec(
            arch=arch,
            input_shape=config.data.image_shape,
            seed=derive_seed(section.seed, "victim", arch),
            train_set=Path(section.root).name,
        )
        path = checkpoint_dir / f"{arch}.pt"
        try:
            if path.exists():
                net, _ = load_checkpoint(path, expected_spec=spec)
                victims.append(TorchVictim(net, arch))
                continue
            class_images, _ = load_labeled_dir(section.root, config.data.classes, config.data.image_shape)
            victim = train_victim(spec, class_images, section.epochs, section.learning_rate)
        except NoBoxError as e:
            raise VictimLoadError(f"受害者 {arch} 加载失败: {e}") from e
        save_checkpoint(victim.net, path)
        victims.append(victim)
    return victims


# ==================== 评估 ====================

def load_adversarial_dir(path: Path, image_shape) -> List[Tuple[ImageTensor, int, CraftRecord]]:
    """读取目录中成对的 PNG + JSON"""
    path = Path(path)
    if not path.is_dir():
        raise DataPathError(f"对抗样本目录不存在: {path}")
    pngs = sorted(path.glob("*.png"))
    if not pngs:
        raise EmptyEvaluationError(f"对抗样本目录为空: {path}")
    items = []
    for png in pngs:
        sidecar = png.with_suffix(".json")
        if not sidecar.exists():
            raise DataPathError(f"缺少 sidecar 记录: {sidecar}")
        record = CraftRecord.model_validate_json(sidecar.read_text(encoding="utf-8"))
        items.append((load_image(png, image_shape), record.label, record))
    return items


def verification_pairs(items, pool: Pool):
    """正样本对 (对抗样本, 同类良性图像)，负样本对 (对抗样本, 异类良性图像)"""
    genuine, impostor = [], []
    for k, (image, label, _) in enumerate(items):
        same, other = pool[label], pool[1 - label]
        genuine.append((image, same[(k + 1) % len(same)]))
        impostor.append((image, other[k % len(other)]))
    return genuine, impostor


def write_report(report: EvalReport, layout: RunLayout) -> Tuple[Path, Path]:
    layout.eval_dir.mkdir(parents=True, exist_ok=True)
    layout.report_json.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    row = {**report.accuracy, "Average": report.average}
    pd.DataFrame([row], index=pd.Index([report.method], name="method")).to_csv(
        layout.report_csv, float_format="%.4f"
    )
    return layout.report_json, layout.report_csv


def cmd_eval(
    config: RunConfig,
    adversarial_dir: Optional[Path] = None,
    victims: Optional[Sequence[TorchVictim]] = None,
) -> EvalReport:
    """
    在受害者模型上评估对抗样本，写出 JSON + CSV 报告

    Raises:
        IncompleteReportError: 远程评估有样本失败（报告仍会写出）
    """
    layout = run_layout(config)
    start = time.perf_counter()
    items = load_adversarial_dir(Path(adversarial_dir or layout.adversarial_dir), config.data.image_shape)
    examples = [(image, label) for image, label, _ in items]
    victims = list(victims) if victims is not None else load_or_train_victims(config)

    report = evaluate_victims(victims, examples, config.method_label, config.config_hash(), config.seeds.attack)
    report.n = config.n
    report.num_decoders = config.model.num_decoders

    if config.evaluation.verification:
        pool, _ = load_pool(config)
        genuine, impostor = verification_pairs(items, pool)
        layout.eval_dir.mkdir(parents=True, exist_ok=True)
        for victim in victims:
            curve = roc_curve(EmbeddingVerifier(victim), genuine, impostor)
            (layout.eval_dir / f"roc_{victim.name}.json").write_text(curve.model_dump_json(indent=2), encoding="utf-8")
            logger.info(f"受害者 {victim.name} 验证 ROC AUC = {curve.auc:.4f}")

    if config.remote.enabled:
        remote = asyncio.run(remote_victim_eval(
            config.remote.endpoint,
            examples,
            token=settings.REMOTE_VICTIM_TOKEN,
            rate_limit=config.remote.rate_limit,
            max_retries=config.remote.max_retries,
            backoff=config.remote.backoff,
            timeout=config.remote.timeout,
        ))
        for name in remote.accuracy:
            report.add(name, remote.correct[name], remote.total[name])
        report.complete = remote.complete
        report.failed_items = remote.failed_items

    report_json, report_csv = write_report(report, layout)
    update_manifest(config, artifacts={
        "report_json": _relative(layout, report_json),
        "report_csv": _relative(layout, report_csv),
    }, timings={"eval": time.perf_counter() - start})
    logger.info(f"[{config.method_label}] 平均受害者准确率 {report.average:.2%}")
    if not report.complete:
        raise IncompleteReportError(
            f"评估报告不完整，失败样本: {report.failed_items}",
            report=report.model_dump(),
        )
    return report


# ==================== 清单 ====================

def update_manifest(
    config: RunConfig,
    targets: Optional[Dict[str, Dict[str, str]]] = None,
    artifacts: Optional[Dict[str, str]] = None,
    timings: Optional[Dict[str, float]] = None,
) -> RunManifest:
    """合并写入 manifest.json，写入前确认所有引用的文件都存在"""
    layout = run_layout(config)
    manifest = RunManifest(config_hash=config.config_hash(), tool_version=__version__)
    if layout.manifest_path.exists():
        previous = RunManifest.model_validate_json(layout.manifest_path.read_text(encoding="utf-8"))
        if previous.config_hash == manifest.config_hash:
            manifest = previous
    for tid, entry in (targets or {}).items():
        manifest.targets.setdefault(tid, {}).update(entry)
    manifest.artifacts.update(artifacts or {})
    manifest.timings.update(timings or {})
    manifest.created_at = datetime.now(timezone.utc).isoformat()

    referenced = list(manifest.artifacts.values()) + [
        p for entry in manifest.targets.values() for key, p in entry.items() if not key.endswith("sha256")
    ]
    missing = [p for p in referenced if not (layout.root / p).exists()]
    if missing:
        raise NoBoxError(f"清单引用的文件不存在: {missing}")
    layout.manifest_path.parent.mkdir(parents=True, exist_ok=True)
    layout.manifest_path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return manifest


def _prepare_run(config: RunConfig) -> RunLayout:
    layout = run_layout(config)
    dump_run_config(config, layout.config_path)
    update_manifest(config, artifacts={"config": _relative(layout, layout.config_path)})
    return layout


# ==================== 命令 ====================

def cmd_make_toy_data(config: RunConfig, per_class: int = 60, victim_per_class: int = 200) -> Tuple[Path, Path]:
    """生成攻击方数据与受害者训练数据（两者种子不同，互不相交）"""
    c, h, w = config.data.image_shape
    if h != w:
        raise DataPathError(f"玩具数据只支持方形图像，实际为 {h}x{w}")
    aux_root = make_toy_dataset(
        config.data.root, per_class, h, c, derive_seed(config.seeds.data, "toy-aux"), config.data.classes
    )
    victim_root = make_toy_dataset(
        config.victims.root, victim_per_class, h, c, derive_seed(config.seeds.data, "toy-victim"), config.data.classes
    )
    return aux_root, victim_root


def cmd_train(config: RunConfig) -> List[Path]:
    """为每个目标训练替代模型，返回检查点路径"""
    layout = _prepare_run(config)
    start = time.perf_counter()
    pool, _ = load_pool(config)
    targets = select_targets(config)
    results = Parallel(n_jobs=config.workers)(
        delayed(train_target)(config, pool, target) for target in targets
    )
    entries = {t.target_id: r for t, r in zip(targets, results)}
    update_manifest(config, targets=entries, timings={"train": time.perf_counter() - start})
    return [layout.root / r["checkpoint"] for r in results]


def cmd_craft(config: RunConfig, checkpoint: Optional[Path] = None) -> List[Path]:
    """
    为每个目标生成对抗样本；给出 checkpoint 时只处理该检查点对应的目标

    Returns:
        对抗样本 PNG 路径
    """
    layout = _prepare_run(config)
    start = time.perf_counter()
    pool, files = load_pool(config)
    targets = select_targets(config)
    if checkpoint is not None:
        _, extra = load_checkpoint(checkpoint)
        targets = [t for t in targets if t.target_id == extra.get("target_id")]
        if not targets:
            raise SpecMismatchError(f"检查点 {checkpoint} 不属于当前配置的任何目标")
    results = Parallel(n_jobs=config.workers)(
        delayed(craft_target)(config, pool, files, target, checkpoint) for target in targets
    )
    entries = {t.target_id: r for t, r in zip(targets, results)}
    update_manifest(config, targets=entries, timings={"craft": time.perf_counter() - start})
    return [layout.root / r["adversarial"] for r in results]


def cmd_report(run_dirs: Sequence[Path], output_dir: Path) -> Dict[str, Path]:
    """汇总多次运行，生成对比表与图"""
    if not run_dirs:
        raise DataPathError("至少需要一个运行目录")
    runs = [load_run(Path(d)) for d in run_dirs]
    return ReportGenerator(output_dir).generate(runs)


def run_pipeline(config: RunConfig) -> EvalReport:
    """完整流水线：每个目标 (训练, 生成) 并行，然后评估与报告"""
    layout = _prepare_run(config)
    start = time.perf_counter()
    pool, files = load_pool(config)
    targets = select_targets(config)
    logger.info(
        f"流水线开始: {config.name}（{config.method_label}, n={config.n}, {len(targets)} 个目标, "
        f"{config.workers} 个进程, config {config.config_hash()[:12]}）"
    )
    results = Parallel(n_jobs=config.workers)(
        delayed(_train_and_craft)(config, pool, files, target) for target in targets
    )
    update_manifest(config, targets=dict(results), timings={"train_craft": time.perf_counter() - start})

    try:
        report = cmd_eval(config)
    finally:
        cmd_report([layout.root], layout.root / "report")
    return report


def manifest_summary(layout: RunLayout) -> Dict[str, str]:
    manifest = RunManifest.model_validate_json(layout.manifest_path.read_text(encoding="utf-8"))
    return {"config_hash": manifest.config_hash, "content_hash": manifest.content_hash()}


def describe_report(report: EvalReport) -> str:
    return json.dumps({"method": report.method, **report.accuracy, "Average": report.average}, ensure_ascii=False)

