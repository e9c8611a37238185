"""
Command-line front end.

    dmpc-platoon run <scenario|preset> [--out DIR] [--seed S] [-N N] [--norm KIND]
    dmpc-platoon check <scenario|preset> [-N N] [--json]
    dmpc-platoon counterexample
    dmpc-platoon scaffold <preset> [-N N] [--out FILE]
"""

import json
import logging
import sys
from pathlib import Path
from typing import Optional

import click
import numpy as np

from models.report_models import CheckReport
from models.scenario_models import ScenarioConfig, parse_scenario
from services.storage import write_run
from services.tasks import SolvePool

from .config import find_preset, get_log_level, get_thread_count, list_presets
from .errors import DmpcError, ScenarioError, TopologyError
from .sim import build_graph, build_spacing, build_weights, run
from .stability import check_weight_condition, counterexample_norms
from .topology import information_matrix, nilpotency_index, spectral_radius, terminal_error_matrix, \
    check_admissible

logger = logging.getLogger(__name__)


def load_document(source: str) -> dict:
    """Read a scenario file, or a preset by name."""
    path = Path(source)
    if not path.is_file():
        preset = find_preset(source)
        if preset is None:
            raise ScenarioError(f"'{source}' is neither a scenario file nor a preset "
                                f"(available: {', '.join(list_presets())})")
        logger.info(f"using preset {preset}")
        path = preset
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path} is not valid JSON: {e}")


def load_scenario(source: str, n_followers: Optional[int] = None, seed: Optional[int] = None,
                  norm: Optional[str] = None) -> ScenarioConfig:
    document = load_document(source)
    if "scenario" in document and "fingerprint" in document:
        document = document["scenario"]
    if n_followers is not None:
        document["n_followers"] = n_followers
    if seed is not None:
        document["seed"] = seed
    if norm is not None:
        document["norm_kind"] = norm
    return parse_scenario(document)


def build_check_report(config: ScenarioConfig) -> CheckReport:
    graph = build_graph(config)
    admissible = check_admissible(graph)
    weights = check_weight_condition(graph, build_weights(config, graph))
    report = CheckReport(topology_ok=admissible.ok, topology_detail=admissible.describe(), weights=weights)
    if admissible.ok:
        spacing = build_spacing(config)
        T = terminal_error_matrix(graph, config.dt, spacing.headways())
        index = nilpotency_index(T)
        try:
            radius = spectral_radius(information_matrix(graph))
        except TopologyError:
            radius = None
        report = report.model_copy(update={"nilpotency_index": index, "settling_time": index * config.dt,
                                           "spectral_radius": radius})
    return report


def _fail(error: DmpcError) -> None:
    logger.error(error.detail)
    click.echo(f"error: {error.detail}", err=True)
    sys.exit(error.exit_code)


@click.group()
@click.option("--log-level", default=None, help="Root log level (defaults to DMPC_LOG_LEVEL).")
def cli(log_level: Optional[str]) -> None:
    """Distributed MPC for heterogeneous vehicle platoons."""
    logging.basicConfig(level=(log_level or get_log_level()).upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command("run")
@click.argument("scenario")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out", show_default=True)
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("-N", "n_followers", type=click.IntRange(min=1), default=None, help="Override the follower count.")
@click.option("--norm", type=click.Choice(["l1", "l2", "quadratic"]), default=None, help="Override norm_kind.")
def cmd_run(scenario: str, out_dir: str, seed: Optional[int], n_followers: Optional[int], norm: Optional[str]):
    """Simulate a scenario and write trajectory, error, summary and Lyapunov CSVs."""
    try:
        config = load_scenario(scenario, n_followers=n_followers, seed=seed, norm=norm)
        with SolvePool(get_thread_count()) as pool:
            result = run(config, pool=pool)
        write_run(result, Path(out_dir))
    except DmpcError as e:
        _fail(e)
    worst = float(np.max(np.abs(result.metrics.spacing_errors)))
    click.echo(f"{config.name}: {config.n_followers} followers, {len(result.history.times) - 1} steps, "
               f"max |spacing error| {worst:.6g} m -> {out_dir}")


@cli.command("check")
@click.argument("scenario")
@click.option("-N", "n_followers", type=click.IntRange(min=1), default=None)
@click.option("--json", "as_json", is_flag=True, help="Print the report as JSON.")
def cmd_check(scenario: str, n_followers: Optional[int], as_json: bool):
    """Static checks: topology admissibility, terminal nilpotency and weight condition."""
    try:
        config = load_scenario(scenario, n_followers=n_followers)
        report = build_check_report(config)
    except DmpcError as e:
        _fail(e)
    if as_json:
        click.echo(report.model_dump_json(indent=2))
    else:
        click.echo(report.topology_detail)
        if report.nilpotency_index is not None:
            click.echo(f"terminal error matrix nilpotent with index {report.nilpotency_index} "
                       f"(settles within {report.settling_time:g} s)")
        if report.spectral_radius is not None:
            click.echo(f"full-information matrix spectral radius {report.spectral_radius:.6g}")
        click.echo(report.weights.describe())
    sys.exit(0 if report.passed else 1)


@cli.command("counterexample")
def cmd_counterexample():
    """Evaluate the two matrix-weighted counterexamples to the weight condition."""
    for case in counterexample_norms():
        verdict = "claim violated" if case.claim_violated else "claim holds"
        click.echo(f"{case.name}: {case.detail} -> gap {case.gap:.5f} ({verdict})")
    sys.exit(0)


@cli.command("scaffold")
@click.argument("preset")
@click.option("-N", "n_followers", type=click.IntRange(min=1), default=None)
@click.option("--out", "out_file", type=click.Path(dir_okay=False), default=None)
def cmd_scaffold(preset: str, n_followers: Optional[int], out_file: Optional[str]):
    """Write a preset as an editable scenario file."""
    try:
        if find_preset(preset) is None:
            raise ScenarioError(f"unknown preset '{preset}' (available: {', '.join(list_presets())})")
        config = load_scenario(preset, n_followers=n_followers)
    except DmpcError as e:
        _fail(e)
    text = json.dumps(config.model_dump(mode="json"), indent=2)
    if out_file:
        Path(out_file).write_text(text + "\n")
        click.echo(f"wrote {out_file}")
    else:
        click.echo(text)


def main() -> None:
    cli(prog_name="dmpc-platoon")
