"""MLMC 实验命令行

用法：
    python mlmc.py run config.json [--seed N] [--out DIR] [--threads N]
    python mlmc.py sweep config.json
    python mlmc.py validate config.json

退出码：0 成功，2 配置错误，3 估计器未收敛
"""

import json
import logging
import sys

import click

from config import get_config
from app.services.harness import check_sweep, load_config, run_experiment, sweep_and_fit, write_reports
from app.utils.errors import BracketError, ConfigError, ConvergenceError, InvalidArgumentError

EXIT_CONFIG_ERROR = 2
EXIT_CONVERGENCE_ERROR = 3


def _overrides(seed, out, threads) -> dict:
    return {"seed": seed, "output_dir": out, "threads": threads}


def _fail(code: int, exc: Exception) -> None:
    click.echo(f"错误: {exc}", err=True)
    for note in getattr(exc, "__notes__", []):
        click.echo(f"  {note}", err=True)
    sys.exit(code)


def _guarded(action):
    """把领域异常映射为退出码"""
    try:
        return action()
    except (ConfigError, InvalidArgumentError) as exc:
        _fail(EXIT_CONFIG_ERROR, exc)
    except (ConvergenceError, BracketError) as exc:
        _fail(EXIT_CONVERGENCE_ERROR, exc)


@click.group()
@click.option("--log-level", default=None, help="日志级别，默认取 MLMC_LOG_LEVEL")
def cli(log_level):
    """多层蒙特卡洛定价与风险度量实验"""
    level = (log_level or get_config().MLMC_LOG_LEVEL).upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="覆盖配置中的 seed")
@click.option("--out", default=None, help="覆盖配置中的 output_dir")
@click.option("--threads", type=int, default=None, help="覆盖配置中的 threads")
def run(config_path, seed, out, threads):
    """运行实验并写出报告"""

    def action():
        config = load_config(config_path, _overrides(seed, out, threads))
        records = run_experiment(config)
        paths = write_reports(records, config.output_dir)
        for record in records:
            for block in record.results:
                click.echo(
                    f"replicate={record.replicate} eps={block.get('eps')} "
                    f"estimate={block.get('estimate')} cost={block.get('total_cost')}"
                )
        click.echo(f"报告目录: {config.output_dir} ({len(paths)} 个文件)")

    _guarded(action)


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--out", default=None)
@click.option("--threads", type=int, default=None)
def sweep(config_path, seed, out, threads):
    """在 eps 列表上运行并拟合 log cost 关于 log eps 的斜率"""

    def action():
        config = load_config(config_path, _overrides(seed, out, threads))
        check_sweep(config)
        records = run_experiment(config)
        write_reports(records, config.output_dir)
        result = sweep_and_fit(config, records)
        click.echo(json.dumps(result.to_dict(), ensure_ascii=False, indent=2))

    _guarded(action)


@cli.command()
@click.argument("config_path", type=click.Path(dir_okay=False))
def validate(config_path):
    """只校验配置，输出规范形式"""

    def action():
        config = load_config(config_path)
        click.echo(json.dumps(config.to_dict(), ensure_ascii=False, indent=2, sort_keys=True))
        click.echo(f"config_hash={config.config_hash()}")

    _guarded(action)


if __name__ == "__main__":
    cli()
