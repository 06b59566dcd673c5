"""
模块依赖约束测试

对抗样本生成不得（直接或间接）引用受害者模型、评估或远程接口。
"""
import ast
from pathlib import Path

PACKAGE_ROOT = Path(__file__).resolve().parent.parent / "nobox"

FORBIDDEN = (
    "nobox.models.victims",
    "nobox.services.evaluation",
    "nobox.services.remote_victim",
    "nobox.api",
)


def _module_path(name: str):
    rel = Path(*name.split("."))
    candidates = [PACKAGE_ROOT.parent / rel.with_suffix(".py"), PACKAGE_ROOT.parent / rel / "__init__.py"]
    return next((p for p in candidates if p.exists()), None)


def _imports(name: str):
    path = _module_path(name)
    if path is None:
        return []
    tree = ast.parse(path.read_text(encoding="utf-8"))
    found = []
    for node in ast.walk(tree):
        if isinstance(node, ast.Import):
            found += [alias.name for alias in node.names]
        elif isinstance(node, ast.ImportFrom) and node.module and node.level == 0:
            found.append(node.module)
            found += [f"{node.module}.{alias.name}" for alias in node.names]
    return [m for m in found if m.startswith("nobox")]


def _closure(root: str):
    seen, stack = set(), [root]
    while stack:
        name = stack.pop()
        if name in seen:
            continue
        seen.add(name)
        # 包的 __init__ 也会被执行
        parts = name.split(".")
        stack += [".".join(parts[:i]) for i in range(1, len(parts))]
        stack += _imports(name)
    return seen


class TestAttackIsolation:
    """攻击模块隔离测试"""

    def test_attack_does_not_reach_victims(self):
        """测试生成模块的导入闭包中没有受害者与评估模块"""
        closure = _closure("nobox.services.attack")
        leaked = sorted(m for m in closure if m.startswith(FORBIDDEN))
        assert leaked == []

    def test_walker_detects_dependency(self):
        """测试依赖遍历能发现已知的间接依赖"""
        assert "nobox.services.evaluation" in _closure("nobox.services.training")
