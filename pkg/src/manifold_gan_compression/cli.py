"""
Command-line interface for manifold-guided GAN compression.
"""

import sys
from pathlib import Path
import json
import click
from typing import Any, Callable, Optional, Tuple
import logging

from .config import RunConfig, load_config
from .core.run_manager import RunManager, STAGES
from .pipeline import StagePipeline
from .utils.exceptions import GanPruneError
from .utils.result import OperationError, OperationResult

logger = logging.getLogger(__name__)

RUN_CONFIG = "config.yaml"


def stage_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """Options shared by every stage command."""
    options = [
        click.option(
            "--config",
            "-c",
            "config_path",
            type=click.Path(exists=True, dir_okay=False),
            help="YAML config; defaults to the run directory's config.yaml"
        ),
        click.option(
            "--run-dir",
            "-r",
            type=click.Path(file_okay=False),
            default="runs/default",
            show_default=True,
            help="Run directory"
        ),
        click.option(
            "--set",
            "overrides",
            multiple=True,
            metavar="KEY=VALUE",
            help="Override a config value (repeatable), e.g. --set lambda1=4.0"
        ),
        click.option("--seed", type=int, help="Run seed (required unless the config sets one)"),
        click.option(
            "--data-root",
            type=click.Path(file_okay=False),
            envvar="GANPRUNE_DATA_ROOT",
            help="Shared dataset root for gen-data"
        ),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _resolve_config(
    config_path: Optional[str],
    run_dir: Path,
    overrides: Tuple[str, ...],
    seed: Optional[int]
) -> RunConfig:
    if config_path is None and (run_dir / RUN_CONFIG).exists():
        config_path = str(run_dir / RUN_CONFIG)
        logger.debug(f"Using run config {config_path}")
    return load_config(config_path, overrides, seed)


def _fail(error: OperationError) -> None:
    payload = {"error": error.error_type, "message": error.message, "details": error.details or {}}
    click.echo(json.dumps(payload, default=str), err=True)
    sys.exit(2 if error.error_type == "ConfigurationError" else 1)


def run_stage(
    stage: str,
    config_path: Optional[str],
    run_dir: str,
    overrides: Tuple[str, ...],
    seed: Optional[int],
    data_root: Optional[str]
) -> None:
    """Resolve the config, lock the run directory and run one stage."""
    path = Path(run_dir)
    try:
        cfg = _resolve_config(config_path, path, overrides, seed)
        with RunManager(path) as manager:
            result = StagePipeline(manager, cfg, Path(data_root) if data_root else None).run(stage)
            if result.success:
                (path / RUN_CONFIG).write_text(cfg.to_yaml())
    except GanPruneError as e:
        result = OperationResult.from_exception(e)
    except Exception as e:
        logger.exception(f"Stage {stage} crashed")
        result = OperationResult.fail(str(e), error_type=type(e).__name__)

    if not result.success:
        _fail(result.error)
    click.echo(json.dumps({"stage": stage, "run_dir": str(path), "result": result.data}, indent=2, default=str))


@click.group()
@click.version_option(package_name="manifold-gan-compression")
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose: bool):
    """Manifold-guided GAN compression.

    Prunes a pretrained image-to-image generator and its discriminator with
    two collaborating agents, then finetunes the extracted networks with
    distillation. Every stage writes into a run directory and reads the
    latest outputs of the stages it depends on.

    \b
    Pipeline:
    gen-data -> pretrain -> train-encoder -> build-index -> prune
             -> finalize -> finetune -> eval -> report

    Common usage examples:

    \b
    # Start a run from a config file
    $ ganprune gen-data --config configs/toy.yaml --run-dir runs/toy --seed 0

    \b
    # Later stages reuse the run's config; overrides are recorded in the snapshot
    $ ganprune prune --run-dir runs/toy --set lambda1=4.0

    \b
    # Full ablation ladder over the configured seeds
    $ ganprune ablate --run-dir runs/toy

    \b
    # Figures and tables under runs/toy/report/
    $ ganprune report --run-dir runs/toy
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


@cli.command("gen-data")
@stage_options
def gen_data(**kwargs):
    """Render the synthetic paired dataset (train/val/test)."""
    run_stage("gen-data", **kwargs)


@cli.command("pretrain")
@stage_options
def pretrain(**kwargs):
    """Train the original generator and discriminator."""
    run_stage("pretrain", **kwargs)


@cli.command("train-encoder")
@stage_options
def train_encoder(**kwargs):
    """Train the contrastive image encoder."""
    run_stage("train-encoder", **kwargs)


@cli.command("build-index")
@stage_options
def build_index(**kwargs):
    """Build the top-k neighborhood index over generator predictions."""
    run_stage("build-index", **kwargs)


@cli.command("prune")
@stage_options
def prune(**kwargs):
    """Train the pruning agents against the frozen GAN."""
    run_stage("prune", **kwargs)


@cli.command("finalize")
@stage_options
def finalize(**kwargs):
    """Harden the agents' architectures and extract the sub-networks."""
    run_stage("finalize", **kwargs)


@cli.command("finetune")
@stage_options
def finetune(**kwargs):
    """Finetune the extracted networks, with distillation when enabled."""
    run_stage("finetune", **kwargs)


@cli.command("eval")
@stage_options
def evaluate(**kwargs):
    """Fréchet proxy, L1 and neighborhood overlap of the generators."""
    run_stage("eval", **kwargs)


@cli.command("ablate")
@stage_options
def ablate(**kwargs):
    """Run the ablation ladder end to end for every configured seed."""
    run_stage("ablate", **kwargs)


@cli.command("report")
@stage_options
def report(**kwargs):
    """Write loss curves, tables and neighborhood grids."""
    run_stage("report", **kwargs)


@cli.command("status")
@click.option(
    "--run-dir",
    "-r",
    type=click.Path(file_okay=False, exists=True),
    default="runs/default",
    show_default=True,
    help="Run directory"
)
def status(run_dir: str):
    """List the recorded versions of every stage."""
    manager = RunManager(Path(run_dir))
    for stage in STAGES:
        versions = manager.versions(stage)
        if not versions:
            click.echo(f"  {stage:<14} -")
            continue
        latest = versions[-1]
        click.echo(f"  {stage:<14} {latest['path']:<18} ({len(versions)} run(s), {latest['completed_at']})")


def main():
    """Main entry point."""
    cli()


if __name__ == "__main__":
    main()
