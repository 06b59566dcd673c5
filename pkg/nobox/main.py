"""
nobox - 命令行入口

子命令: make-toy-data, train, craft, eval, report, pipeline, serve-victim
退出码: 0 成功, 1 配置校验错误, 2 运行期失败, 3 评估报告不完整
"""
import functools
import json
import traceback
from pathlib import Path
from typing import Any, Dict, Optional

import click
import torch
import uvicorn
from loguru import logger

from nobox import __version__
from nobox.core.config import load_run_config, settings
from nobox.core.exceptions import EXIT_RUNTIME, EXIT_VALIDATION, NoBoxError, VictimLoadError
from nobox.core.logging import setup_logging
from nobox.models.schemas import RunConfig
from nobox.services import pipeline


class NoBoxGroup(click.Group):
    """
    顶层异常处理

    业务异常按其 exit_code 退出，其余异常记录完整堆栈后以运行期失败退出。
    """

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort):
            raise
        except click.UsageError as e:
            e.show()
            ctx.exit(EXIT_VALIDATION)
        except NoBoxError as e:
            logger.error(f"{type(e).__name__}: {e}")
            click.echo(f"错误: {e}", err=True)
            ctx.exit(e.exit_code)
        except Exception as e:
            logger.error(f"未处理的异常:\n{traceback.format_exc()}")
            click.echo(f"运行失败: {type(e).__name__}: {e}", err=True)
            ctx.exit(EXIT_RUNTIME)


def config_options(func):
    """加载 YAML 配置的公共选项，命令行参数覆盖配置文件中的同名字段"""
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path), default=None,
                     help="实验配置 YAML 文件"),
        click.option("--mechanism", default=None, help="rotation | jigsaw | prototypical | naive_ae | naive_supervised"),
        click.option("--n", "n", type=int, default=None, help="辅助集大小（偶数，不超过 40）"),
        click.option("--decoders", type=int, default=None, help="原型机制的解码器数 K"),
        click.option("--epsilon", type=float, default=None, help="扰动预算 ε"),
        click.option("--norm", default=None, help="linf | l2"),
        click.option("--baseline", default=None, help="ifgsm | pgd | none"),
        click.option("--seed", type=int, default=None, help="同时覆盖 data / model / attack 三个种子"),
        click.option("--name", default=None, help="运行名称（输出子目录）"),
        click.option("--workers", type=int, default=None, help="并行进程数"),
        click.option("--output-root", default=None, help="输出根目录"),
        click.option("--data-root", default=None, help="攻击方数据目录 <root>/<class>/*.png"),
    ]
    for option in reversed(options):
        func = option(func)

    @functools.wraps(func)
    def wrapper(config_path, mechanism, n, decoders, epsilon, norm, baseline, seed, name, workers,
                output_root, data_root, **kwargs):
        overrides: Dict[str, Any] = {
            "mechanism": mechanism,
            "n": n,
            "model.K": decoders,
            "attack.epsilon": epsilon,
            "attack.norm": norm,
            "attack.baseline": baseline,
            "seeds.data": seed,
            "seeds.model": seed,
            "seeds.attack": seed,
            "name": name,
            "workers": workers,
            "output_root": output_root,
            "data.root": data_root,
        }
        config = load_run_config(config_path, overrides)
        logger.info(f"配置 {config.name}: {config.method_label}, n={config.n}, hash {config.config_hash()[:12]}")
        return func(config=config, **kwargs)

    return wrapper


@click.group(cls=NoBoxGroup)
@click.version_option(__version__, prog_name="nobox")
@click.option("--log-level", default=None, help="日志级别（默认取 LOG_LEVEL 环境变量）")
def cli(log_level: Optional[str]):
    """无盒对抗攻击工具集"""
    setup_logging(log_level)
    if settings.TORCH_NUM_THREADS:
        torch.set_num_threads(settings.TORCH_NUM_THREADS)


@cli.command("make-toy-data")
@config_options
@click.option("--per-class", type=int, default=60, show_default=True, help="攻击方数据每类图像数")
@click.option("--victim-per-class", type=int, default=200, show_default=True, help="受害者训练数据每类图像数")
def make_toy_data(config: RunConfig, per_class: int, victim_per_class: int):
    """生成两类玩具图像数据集"""
    aux_root, victim_root = pipeline.cmd_make_toy_data(config, per_class, victim_per_class)
    click.echo(f"{aux_root}\n{victim_root}")


@cli.command()
@config_options
def train(config: RunConfig):
    """为每个目标样本训练替代模型"""
    for path in pipeline.cmd_train(config):
        click.echo(str(path))


@cli.command()
@config_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
              help="只处理该检查点对应的目标")
def craft(config: RunConfig, checkpoint: Optional[Path]):
    """在替代模型上生成对抗样本（PNG + JSON）"""
    for path in pipeline.cmd_craft(config, checkpoint):
        click.echo(str(path))


@cli.command("eval")
@config_options
@click.option("--adversarial-dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="对抗样本目录（默认为本次运行的 adversarial/）")
def evaluate(config: RunConfig, adversarial_dir: Optional[Path]):
    """在受害者模型上评估对抗样本"""
    report = pipeline.cmd_eval(config, adversarial_dir)
    click.echo(pipeline.describe_report(report))


@cli.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--output", type=click.Path(file_okay=False, path_type=Path), default=Path("./reports"),
              show_default=True, help="报告输出目录")
def report(run_dirs, output: Path):
    """汇总多次运行：对比表、训练曲线、n / K 扫描图"""
    outputs = pipeline.cmd_report(list(run_dirs), output)
    click.echo(json.dumps({k: str(v) for k, v in outputs.items()}, indent=2, ensure_ascii=False))


@cli.command("pipeline")
@config_options
def run_pipeline(config: RunConfig):
    """train → craft → eval → report"""
    report = pipeline.run_pipeline(config)
    click.echo(pipeline.describe_report(report))
    click.echo(json.dumps(pipeline.manifest_summary(pipeline.run_layout(config))))


@cli.command("serve-victim")
@config_options
@click.option("--arch", default="small_cnn", show_default=True, help="被托管的受害者结构")
@click.option("--host", default=None, help="监听地址（默认 VICTIM_SERVER_HOST）")
@click.option("--port", type=int, default=None, help="监听端口（默认 VICTIM_SERVER_PORT）")
def serve_victim(config: RunConfig, arch: str, host: Optional[str], port: Optional[int]):
    """启动参考远程受害者服务"""
    from nobox.api.victim_server import create_victim_app

    victims = {v.name: v for v in pipeline.load_or_train_victims(config)}
    if arch not in victims:
        raise VictimLoadError(f"受害者 {arch} 不在配置的受害者列表中: {sorted(victims)}")
    app = create_victim_app(victims[arch], expected_shape=config.data.image_shape)
    uvicorn.run(app, host=host or settings.VICTIM_SERVER_HOST, port=port or settings.VICTIM_SERVER_PORT)


def main():
    cli(prog_name="nobox")


if __name__ == "__main__":
    main()
