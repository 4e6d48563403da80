"""Command line: simulate / gps-model / run / evaluate / bench / serve.

Failures print a JSON error object on stdout: exit code 2 for domain and
config errors, 1 for anything unexpected.
"""

import functools
import json
import logging
import sys
from pathlib import Path

import click
import uvicorn

from src import pipeline
from src.errors import ConfigError, TwinLocError
from src.models import AlignmentMode, Mode

logger = logging.getLogger(__name__)


def _choice(enum_cls, value: str | None, option: str):
    """Enum option parsed inside reports_errors, so a bad value still answers in JSON."""
    if value is None:
        return None
    try:
        return enum_cls(value)
    except ValueError:
        raise ConfigError(f"{option}: unknown value {value!r}", choices=[m.value for m in enum_cls]) from None


def _echo(data) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True, default=str))


def reports_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except TwinLocError as exc:
            _echo(exc.to_dict())
            sys.exit(2)
        except click.exceptions.Exit:
            raise
        except Exception as exc:
            logger.exception("unexpected failure")
            _echo({"error": "internal_error", "detail": f"{type(exc).__name__}: {exc}"})
            sys.exit(1)

    return wrapper


@click.group()
@click.option("--log-level", default="INFO", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"]), show_default=True)
def cli(log_level: str):
    logging.basicConfig(
        level=getattr(logging, log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides the seed in the config.")
@reports_errors
def simulate(config_path: str, out_dir: str, seed: int | None):
    """Write a scenario bundle: mesh, ground truth, IMU, observations, GPS fixes."""
    config = pipeline.load_config(config_path, seed=seed)
    manifest = pipeline.cmd_simulate(config, out_dir)
    _echo({"out": out_dir, "config_hash": manifest["config_hash"], "files": manifest["files"]})


@cli.command("gps-model")
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
@click.option("--samples", type=int, default=None)
@click.option("-k", "--components", "k", type=int, default=None)
@click.option("--seed", type=int, default=None)
@reports_errors
def gps_model(bundle_dir: str, out_path: str | None, samples: int | None, k: int | None, seed: int | None):
    """Fit the satellite-count GP and the multipath GMM on the bundle's twin."""
    _echo(pipeline.cmd_gps_model(bundle_dir, out_path, samples, k, seed))


@cli.command()
@click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mode", type=str, default=None, help="vio-only | vio-gps | vio-twin; default from the bundle config.")
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False))
@click.option("--deterministic/--async", "deterministic", default=None)
@reports_errors
def run(bundle_dir: str, mode: str | None, out_dir: str | None, deterministic: bool | None):
    """Run the estimator on a bundle and evaluate against its ground truth."""
    mode = _choice(Mode, mode, "--mode")
    _echo(pipeline.cmd_run(bundle_dir, mode, out_dir, deterministic))


@cli.command()
@click.option("--gt", "gt_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--est", "est_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--alignment", "alignment_mode", type=str, default="none", show_default=True, help="none | yaw4dof | se3")
@click.option("--max-dt", type=float, default=0.02, show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
@reports_errors
def evaluate(gt_path: str, est_path: str, alignment_mode: str, max_dt: float, out_path: str | None):
    """ATE_P and ATE_R of an estimate CSV against a ground-truth CSV."""
    alignment_mode = _choice(AlignmentMode, alignment_mode, "--alignment")
    metrics = pipeline.cmd_evaluate(gt_path, est_path, alignment_mode, out_path, max_dt)
    _echo(metrics.model_dump(mode="json"))


@cli.command()
@click.option("--config", "bench_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--db", "db_url", default=None, help="SQLAlchemy URL, e.g. sqlite+aiosqlite:///runs.sqlite3")
@click.option("--workers", type=int, default=None)
@reports_errors
def bench(bench_path: str, out_dir: str, db_url: str | None, workers: int | None):
    """Run every (scenario, seed, mode) cell of a bench file."""
    _echo(pipeline.cmd_bench(bench_path, out_dir, db_url, workers))


@cli.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, type=int, show_default=True)
def serve(host: str, port: int):
    """Results API over the runs database."""
    uvicorn.run("src.main:app", host=host, port=port)


def main():
    cli(prog_name=Path(sys.argv[0]).name)


if __name__ == "__main__":
    main()
