"""
玩具规模的方向性实验

分钟级运行，默认不执行：pytest -m slow
"""
import statistics

import pytest

from nobox.core.reproducibility import config_hash
from nobox.data.loader import load_labeled_dir, sample_auxiliary_set, sample_prototype_bank
from nobox.models.schemas import AuxiliarySet, LabeledImage, Mechanism
from nobox.services import pipeline
from nobox.services.training import train_accuracy, train_substitute

from tests.conftest import tiny_run_config

pytestmark = pytest.mark.slow

SEEDS = range(5)
GAP = 0.03


def _experiment_config(root, **updates):
    base = {
        "n": 20,
        "train": {"max_iterations": 400, "check_interval": 20, "plateau_patience": 10},
        "attack": {"epsilon": 0.1, "step_size": 0.01, "baseline_iters": 50, "ila_iters": 30},
        "targets": {"count": 20},
        "victims": {"architectures": ["small_cnn", "wide_cnn", "deep_cnn"], "epochs": 10},
    }
    for key, value in updates.items():
        base[key] = {**base[key], **value} if isinstance(value, dict) and key in base else value
    return tiny_run_config(root, **base)


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("experiments")
    pipeline.cmd_make_toy_data(_experiment_config(root), per_class=60, victim_per_class=200)
    return root


def _mean_accuracy(root, **updates) -> float:
    averages = []
    name = config_hash(updates)[:10]
    for seed in SEEDS:
        config = _experiment_config(
            root, name=f"{name}_s{seed}", seeds={"data": seed, "model": seed, "attack": seed}, **updates,
        )
        averages.append(pipeline.run_pipeline(config).average)
    return statistics.mean(averages)


class TestTransferOrdering:
    """各训练机制的迁移强弱顺序"""

    def test_mechanism_ordering(self, toy_root):
        """测试受害者准确率: 原型 < 旋转 / 拼图 < 朴素自编码，且均低于朴素有监督"""
        acc = {m.value: _mean_accuracy(toy_root, mechanism=m.value) for m in Mechanism}
        assert acc["prototypical"] + GAP <= acc["rotation"]
        assert acc["prototypical"] + GAP <= acc["jigsaw"]
        assert acc["rotation"] + GAP <= acc["naive_ae"]
        assert acc["jigsaw"] + GAP <= acc["naive_ae"]
        for mechanism in ("naive_ae", "jigsaw", "rotation", "prototypical"):
            assert acc[mechanism] + GAP <= acc["naive_supervised"]


class TestVariants:
    """多解码器与基线攻击的对比"""

    def test_more_decoders_not_worse(self, toy_root):
        """测试 K=5 的平均受害者准确率不高于 K=1 超过 1 个百分点"""
        k1 = _mean_accuracy(toy_root, mechanism="prototypical", model={"K": 1})
        k5 = _mean_accuracy(toy_root, mechanism="prototypical", model={"K": 5})
        assert k5 <= k1 + 0.01

    def test_pgd_not_worse_than_ifgsm(self, toy_root):
        """测试 PGD+ILA 不弱于 I-FGSM+ILA"""
        ifgsm = _mean_accuracy(toy_root, mechanism="prototypical", attack={"baseline": "ifgsm"})
        pgd = _mean_accuracy(toy_root, mechanism="prototypical", attack={"baseline": "pgd"})
        assert pgd <= ifgsm + 0.01


class TestOverfitting:
    """小样本下替代模型的过拟合程度"""

    def _gap(self, root, mechanism: Mechanism, seed: int) -> float:
        config = _experiment_config(root, mechanism=mechanism.value)
        (class0, class1), _ = load_labeled_dir(config.data.root, config.data.classes, config.data.image_shape)
        aux = sample_auxiliary_set(class0, class1, config.n, (0, 0), seed)
        bank = sample_prototype_bank(aux, 1, seed) if mechanism == Mechanism.PROTOTYPICAL else None
        model, _ = train_substitute(pipeline.build_substitute(config, seed), aux, config.train_config(seed), bank)

        used = set(aux.sources)
        held_out = [
            LabeledImage(image=img, label=label)
            for label, pool in enumerate((class0, class1))
            for i, img in enumerate(pool) if (label, i) not in used
        ]
        held_out = held_out[:20] + held_out[-20:]
        test_set = AuxiliarySet(examples=held_out, target_index=0)
        return train_accuracy(model, aux, mechanism, bank) - train_accuracy(model, test_set, mechanism, bank)

    def test_prototypical_gap_smaller(self, toy_root):
        """测试原型机制的训练 / 测试准确率差距小于朴素有监督分类器"""
        seeds = range(10)
        proto = statistics.mean(self._gap(toy_root, Mechanism.PROTOTYPICAL, s) for s in seeds)
        naive = statistics.mean(self._gap(toy_root, Mechanism.NAIVE_SUPERVISED, s) for s in seeds)
        assert proto < naive
