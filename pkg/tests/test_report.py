"""
对比报告生成测试
"""
import math

import pandas as pd
import pytest

from nobox.core.exceptions import DataPathError
from nobox.models.schemas import EvalReport, RunConfig, TrainLog
from nobox.services.report_generator import AVERAGE_COLUMN, ReportGenerator, RunSummary, load_run


def _run(name, mechanism="rotation", n=20, K=1, accuracy=None, logs=None):
    config = RunConfig.model_validate({"name": name, "mechanism": mechanism, "n": n, "model": {"K": K}})
    report = None
    if accuracy is not None:
        report = EvalReport(method=config.method_label)
        for victim, (correct, total) in accuracy.items():
            report.add(victim, correct, total)
    return RunSummary(name=name, config=config, report=report, train_logs=logs or {})


def _log(values):
    return TrainLog(losses=list(values), accuracy_iterations=[], train_accuracy=[])


class TestComparisonTable:
    """对比表测试"""

    def test_rows_follow_mechanism_order(self, tmp_path):
        """测试行按固定机制顺序排列且均值正确"""
        runs = [
            _run("p", "prototypical", accuracy={"a": (2, 10), "b": (4, 10)}),
            _run("r", "rotation", accuracy={"a": (5, 10), "b": (5, 10)}),
            _run("z", "naive_ae", accuracy={"a": (8, 10), "b": (6, 10)}),
        ]
        table = ReportGenerator(tmp_path).comparison_table(runs)
        assert list(table.index) == ["naive_ae", "rotation", "prototypical"]
        assert list(table.columns) == ["a", "b", AVERAGE_COLUMN]
        assert table.loc["prototypical", AVERAGE_COLUMN] == pytest.approx(0.3)

    def test_duplicate_methods_disambiguated(self, tmp_path):
        """测试同一方法多次运行时行名带上 n 与运行名"""
        runs = [
            _run("r10", n=10, accuracy={"a": (1, 2)}),
            _run("r20", n=20, accuracy={"a": (2, 2)}),
        ]
        table = ReportGenerator(tmp_path).comparison_table(runs)
        assert list(table.index) == ["rotation [n=10, r10]", "rotation [n=20, r20]"]

    def test_missing_victim_left_blank(self, tmp_path):
        """测试受害者集合不一致时缺失单元格为空"""
        runs = [
            _run("r", accuracy={"a": (1, 2), "b": (1, 2)}),
            _run("j", "jigsaw", accuracy={"a": (2, 2)}),
        ]
        table = ReportGenerator(tmp_path).comparison_table(runs)
        assert pd.isna(table.loc["jigsaw", "b"])
        assert table.loc["jigsaw", AVERAGE_COLUMN] == 1.0

    def test_runs_without_report_skipped(self, tmp_path):
        """测试未评估的运行不进入表格"""
        table = ReportGenerator(tmp_path).comparison_table([_run("x"), _run("r", accuracy={"a": (1, 2)})])
        assert list(table.index) == ["rotation"]

    def test_multi_decoder_label(self, tmp_path):
        """测试多解码器原型方法的行名"""
        table = ReportGenerator(tmp_path).comparison_table([_run("p", "prototypical", K=3, accuracy={"a": (1, 4)})])
        assert list(table.index) == ["prototypical (K=3)"]


class TestSweeps:
    """扫描实验识别测试"""

    def test_n_and_k_sweeps(self):
        """测试 n 扫描与 K 扫描分组"""
        runs = [
            _run("r10", n=10, accuracy={"a": (4, 10)}),
            _run("r20", n=20, accuracy={"a": (2, 10)}),
            _run("j20", "jigsaw", n=20, accuracy={"a": (3, 10)}),
            _run("p1", "prototypical", n=20, K=1, accuracy={"a": (5, 10)}),
            _run("p5", "prototypical", n=20, K=5, accuracy={"a": (1, 10)}),
        ]
        n_sweep, k_sweep = ReportGenerator.sweeps(runs)
        assert n_sweep == {"rotation": {10: 0.4, 20: 0.2}}
        assert k_sweep == {"n=20": {1: 0.5, 5: 0.1}}

    def test_single_points_are_not_sweeps(self):
        """测试单点不构成扫描"""
        n_sweep, k_sweep = ReportGenerator.sweeps([_run("r", accuracy={"a": (1, 2)})])
        assert n_sweep == {} and k_sweep == {}


class TestGenerate:
    """报告文件生成测试"""

    def test_outputs_written(self, tmp_path):
        """测试生成对比表、训练曲线与扫描图"""
        logs = {"t000": _log([1.0, 0.5, 0.25]), "t001": _log([2.0, 1.0])}
        runs = [
            _run("r10", n=10, accuracy={"a": (4, 10)}, logs=logs),
            _run("r20", n=20, accuracy={"a": (2, 10)}),
        ]
        outputs = ReportGenerator(tmp_path / "out").generate(runs)
        assert {"table_csv", "table_json", "training_r10", "n_sweep"} <= set(outputs)
        assert "training_r20" not in outputs
        assert all(path.exists() for path in outputs.values())
        frame = pd.read_csv(outputs["table_csv"], index_col=0)
        assert math.isclose(frame.loc["rotation [n=10, r10]", AVERAGE_COLUMN], 0.4)

    def test_load_run_requires_config(self, tmp_path):
        """测试非运行目录报错"""
        with pytest.raises(DataPathError):
            load_run(tmp_path)
