"""
报告生成服务 - 多次运行的方法 × 受害者准确率对比表、训练曲线、n / K 扫描曲线
"""
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from loguru import logger  # noqa: E402

from nobox.core.config import load_run_config  # noqa: E402
from nobox.core.exceptions import DataPathError  # noqa: E402
from nobox.models.schemas import MECHANISM_ORDER, EvalReport, Mechanism, RunConfig, RunLayout, TrainLog  # noqa: E402

AVERAGE_COLUMN = "Average"
FIGURE_SIZE = (6.0, 3.7)


@dataclass
class RunSummary:
    """一次已完成运行的摘要"""
    name: str
    config: RunConfig
    report: Optional[EvalReport]
    train_logs: Dict[str, TrainLog] = field(default_factory=dict)

    @property
    def method(self) -> str:
        return self.config.method_label

    @property
    def sort_key(self) -> Tuple[int, int, int, str]:
        mechanism = self.config.mechanism
        rank = MECHANISM_ORDER.index(mechanism) if mechanism in MECHANISM_ORDER else len(MECHANISM_ORDER)
        return rank, self.config.model.num_decoders, self.config.n, self.name


def load_run(run_dir: Path) -> RunSummary:
    """读取运行目录中的配置、评估报告与训练日志"""
    layout = RunLayout(Path(run_dir))
    if not layout.config_path.exists():
        raise DataPathError(f"{run_dir} 不是完整的运行目录（缺少 {layout.config_path.name}）")
    config = load_run_config(layout.config_path)
    report = None
    if layout.report_json.exists():
        report = EvalReport.model_validate_json(layout.report_json.read_text(encoding="utf-8"))
    logs = {path.parent.name: TrainLog.from_csv(path) for path in layout.train_logs()}
    return RunSummary(name=config.name, config=config, report=report, train_logs=logs)


class ReportGenerator:
    """对比报告生成"""

    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def comparison_table(self, runs: Sequence[RunSummary]) -> pd.DataFrame:
        """
        行 = 方法（按固定机制顺序），列 = 受害者 + Average

        各运行的受害者集合不一致时记录警告，缺失的单元格留空。
        """
        scored = sorted((r for r in runs if r.report is not None), key=lambda r: r.sort_key)
        victim_sets = [tuple(sorted(r.report.accuracy)) for r in scored]
        if len(set(victim_sets)) > 1:
            logger.warning(f"各运行的受害者集合不一致，表格中缺失项留空: {sorted(set(victim_sets))}")
        victims: List[str] = []
        for names in victim_sets:
            victims += [v for v in names if v not in victims]

        counts = defaultdict(int)
        for r in scored:
            counts[r.method] += 1
        rows, index = [], []
        for r in scored:
            row = {v: r.report.accuracy.get(v) for v in victims}
            row[AVERAGE_COLUMN] = r.report.average
            rows.append(row)
            index.append(r.method if counts[r.method] == 1 else f"{r.method} [n={r.config.n}, {r.name}]")
        return pd.DataFrame(rows, index=pd.Index(index, name="method"), columns=victims + [AVERAGE_COLUMN])

    def plot_training_curves(self, run: RunSummary) -> Optional[Path]:
        """每个目标样本一条训练损失曲线；有训练准确率时画在右轴"""
        if not run.train_logs:
            return None
        fig, ax = plt.subplots(figsize=FIGURE_SIZE)
        acc_ax = None
        for target_id, log in sorted(run.train_logs.items()):
            ax.plot(range(1, len(log.losses) + 1), log.losses, linewidth=0.8, alpha=0.7, label=target_id)
            if log.train_accuracy:
                acc_ax = acc_ax or ax.twinx()
                acc_ax.plot(log.accuracy_iterations, log.train_accuracy, linestyle="--", linewidth=0.8)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("training loss")
        if acc_ax is not None:
            acc_ax.set_ylabel("train accuracy")
            acc_ax.set_ylim(0, 1.05)
        ax.set_title(run.method)
        ax.spines["top"].set_visible(False)
        if len(run.train_logs) <= 10:
            ax.legend(fontsize=7, loc="upper right")
        path = self.output_dir / f"training_{run.name}.png"
        fig.savefig(path, bbox_inches="tight", dpi=120)
        plt.close(fig)
        return path

    def plot_sweep(self, series: Dict[str, Dict[int, float]], xlabel: str, filename: str) -> Path:
        """平均受害者准确率随 n 或 K 的变化"""
        fig, ax = plt.subplots(figsize=FIGURE_SIZE)
        for label, points in sorted(series.items()):
            xs = sorted(points)
            ax.plot(xs, [points[x] * 100 for x in xs], marker="o", label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("average victim accuracy (%)")
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
        ax.legend(fontsize=8)
        path = self.output_dir / filename
        fig.savefig(path, bbox_inches="tight", dpi=120)
        plt.close(fig)
        return path

    @staticmethod
    def sweeps(runs: Sequence[RunSummary]) -> Tuple[Dict[str, Dict[int, float]], Dict[str, Dict[int, float]]]:
        """
        识别扫描实验

        n 扫描：同一机制与 K 下有多个不同的 n；
        K 扫描：原型机制在同一 n 下有多个不同的 K。
        """
        by_n: Dict[str, Dict[int, float]] = defaultdict(dict)
        by_k: Dict[str, Dict[int, float]] = defaultdict(dict)
        for r in runs:
            if r.report is None or not r.report.accuracy:
                continue
            by_n[r.method][r.config.n] = r.report.average
            if r.config.mechanism == Mechanism.PROTOTYPICAL:
                by_k[f"n={r.config.n}"][r.config.model.num_decoders] = r.report.average
        n_sweep = {k: v for k, v in by_n.items() if len(v) > 1}
        k_sweep = {k: v for k, v in by_k.items() if len(v) > 1}
        return n_sweep, k_sweep

    def generate(self, runs: Sequence[RunSummary]) -> Dict[str, Path]:
        """生成对比表（CSV + JSON）与全部图"""
        outputs: Dict[str, Path] = {}
        table = self.comparison_table(runs)
        outputs["table_csv"] = self.output_dir / "comparison.csv"
        table.to_csv(outputs["table_csv"], float_format="%.4f")
        outputs["table_json"] = self.output_dir / "comparison.json"
        outputs["table_json"].write_text(
            json.dumps(json.loads(table.to_json(orient="index")), indent=2, ensure_ascii=False),
            encoding="utf-8",
        )

        for run in runs:
            path = self.plot_training_curves(run)
            if path is not None:
                outputs[f"training_{run.name}"] = path

        n_sweep, k_sweep = self.sweeps(runs)
        if n_sweep:
            outputs["n_sweep"] = self.plot_sweep(n_sweep, "auxiliary images n", "n_sweep.png")
        if k_sweep:
            outputs["k_sweep"] = self.plot_sweep(k_sweep, "prototypical decoders K", "k_sweep.png")
        logger.info(f"对比报告已生成: {len(table)} 行方法，{len(outputs)} 个文件 → {self.output_dir}")
        return outputs
