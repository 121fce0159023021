"""Command-line interface.

Subcommands: powerflow, scenario-gen, train, eval, compare, table1.
Exit codes: 0 success, 1 usage/config problem, 2 runtime failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import harness, report
from .netmodel import CaseError, load_case
from .powerflow import SolverConfig, solve
from .scenario import (ScenarioConfig, ScenarioError, make_manifest,
                       make_scenario)


@click.group()
def cli():
    """Voltage-control workbench: AC power flow, episode scenarios, and
    reinforcement-learning agents on transmission test systems."""


@cli.command("powerflow")
@click.argument("case_ref")
@click.option("--format", "fmt", type=click.Choice(["auto", "native", "matpower"]),
              default="auto", show_default=True)
@click.option("--tolerance", type=float, default=1e-8, show_default=True,
              help="Mismatch tolerance in p.u.")
@click.option("--max-iter", type=int, default=25, show_default=True)
@click.option("--no-q-limits", is_flag=True,
              help="Do not enforce generator reactive limits.")
@click.option("--json", "as_json", is_flag=True,
              help="Emit a machine-readable JSON solution.")
def powerflow_cmd(case_ref, fmt, tolerance, max_iter, no_q_limits, as_json):
    """Solve the AC power flow for CASE_REF and print the bus table."""
    path, detected = harness.resolve_case_path(case_ref)
    case = load_case(path, format=detected if fmt == "auto" else fmt)
    config = SolverConfig(tolerance=tolerance, max_iterations=max_iter,
                          enforce_q_limits=not no_q_limits)
    solution = solve(case, config)
    if as_json:
        doc = {
            "case": case.name,
            "status": solution.status.value,
            "iterations": solution.iterations,
            "bus_ids": [b.id for b in case.buses],
            "v": solution.v.tolist() if solution.converged else None,
            "theta": solution.theta.tolist() if solution.converged else None,
            "gen_q_mvar": solution.gen_q.tolist(),
            "slack_p_mw": solution.gen_p_slack,
        }
        click.echo(json.dumps(doc, indent=1))
    else:
        click.echo(report.solution_table(case, solution))
        click.echo(f"status: {solution.status.value} "
                   f"({solution.iterations} iterations)")
    if not solution.converged:
        raise RuntimeError(f"power flow did not converge: "
                           f"{solution.status.value}")


@cli.command("scenario-gen")
@click.argument("case_ref")
@click.option("--count", type=int, required=True)
@click.option("--seed", type=int, required=True)
@click.option("--contingencies", is_flag=True,
              help="Include a single branch outage per scenario.")
@click.option("--contingency-lines", default=None,
              help="Comma-separated from-to pairs, e.g. '1-5,2-3,4-5,7-9'.")
@click.option("-o", "--out", "out_path", required=True,
              type=click.Path(dir_okay=False))
@click.option("--materialize", is_flag=True,
              help="Also write the sampled records next to the manifest.")
def scenario_gen_cmd(case_ref, count, seed, contingencies, contingency_lines,
                     out_path, materialize):
    """Write a scenario-set manifest (and optionally the records) for
    CASE_REF."""
    path, fmt = harness.resolve_case_path(case_ref)
    case = load_case(path, format=fmt)
    pairs = None
    if contingency_lines:
        pairs = tuple(tuple(int(x) for x in item.split("-"))
                      for item in contingency_lines.split(","))
    config = ScenarioConfig(contingencies_enabled=contingencies,
                            contingency_branches=pairs)
    manifest = make_manifest(case, config, seed, count)
    manifest.save(out_path)
    click.echo(f"wrote manifest {manifest.manifest_id} -> {out_path}")
    if materialize:
        records_path = Path(out_path).with_suffix(".records.json")
        records = []
        for i in manifest.indices():
            s = make_scenario(case, config, seed, i)
            records.append({
                "index": i,
                "total_load_p": s.total_load_p,
                "load_p": s.load_p.tolist(),
                "load_q": s.load_q.tolist(),
                "gen_on": s.gen_on.astype(int).tolist(),
                "gen_p": s.gen_p.tolist(),
                "gen_v": s.gen_v.tolist(),
                "shunt_closed": s.shunt_closed.astype(int).tolist(),
                "outaged_branch": s.outaged_branch,
            })
        records_path.write_text(json.dumps(records, indent=1) + "\n")
        click.echo(f"materialized {count} scenarios -> {records_path}")


@cli.command("train")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None,
              help="Override: train only this seed (default: first configured).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              default="runs", show_default=True)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Resume from a training sidecar.")
@click.option("--total-steps", type=int, default=None,
              help="Override the configured step budget.")
def train_cmd(config_path, seed, out_dir, resume, total_steps):
    """Train the DQN agent per CONFIG_PATH; writes checkpoint, sidecar,
    episode CSV, and the training-curve figure."""
    cfg = harness.load_config(config_path)
    run_seed = seed if seed is not None else cfg.seeds[0]
    info = harness.run_training(cfg, run_seed, out_dir, resume=resume,
                                total_steps=total_steps)
    click.echo(f"trained seed {run_seed}: {info['episodes']} episodes, "
               f"{info['successes']} successes")
    click.echo(f"checkpoint: {info['checkpoint']}")


@cli.command("eval")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--agent", "agent_kind",
              type=click.Choice(list(harness.AGENT_KINDS)), required=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False),
              default=None)
@click.option("--seed", type=int, default=0, show_default=True,
              help="Policy seed (random agent only).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              default="runs", show_default=True)
def eval_cmd(config_path, agent_kind, checkpoint, seed, out_dir):
    """Evaluate one agent on the config's shared test manifest."""
    cfg = harness.load_config(config_path)
    rep = harness.run_eval(cfg, agent_kind, checkpoint=checkpoint, seed=seed,
                           out_dir=out_dir)
    rep["agent"] = agent_kind
    click.echo(report.eval_table([rep]))
    if rep["n_episodes"] == 0:
        click.echo("warning: zero-episode manifest, nothing evaluated")


@cli.command("compare")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--agents", "agents_spec", required=True,
              help="Comma list of kind[:checkpoint], e.g. "
                   "'graph,random,dqn:runs/dqn_seed0.params'.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              default="runs/compare", show_default=True)
def compare_cmd(config_path, agents_spec, out_dir):
    """Evaluate several agents on the identical test manifest and render
    the side-by-side table, CSV, and figure."""
    cfg = harness.load_config(config_path)
    specs = []
    for item in agents_spec.split(","):
        kind, _, ckpt = item.partition(":")
        specs.append((kind.strip(), ckpt.strip() or None))
    rows = harness.run_compare(cfg, specs, out_dir)
    click.echo(report.eval_table(rows))
    click.echo(f"wrote {Path(out_dir) / 'compare.csv'} and compare_psoobv.png")


@cli.command("table1")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--observations", required=True,
              type=click.Choice(sorted(harness.OBSERVATION_GROUPS)))
@click.option("--uae/--no-uae", default=True, show_default=True)
@click.option("--mmv/--no-mmv", default=True, show_default=True)
@click.option("--rs", type=click.Choice(["1", "2"]), default="1",
              show_default=True)
@click.option("--scale", type=float, default=1.0, show_default=True,
              help="Fraction applied to training steps and test episodes.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False),
              default="runs/table1", show_default=True)
def table1_cmd(config_path, observations, uae, mmv, rs, scale, out_dir):
    """Train/evaluate one grouped-results row (averaged across the
    configured seeds)."""
    cfg = harness.load_config(config_path)
    harness.run_table1_row(cfg, observations, uae, mmv, int(rs), out_dir,
                           scale=scale)


def main() -> None:
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    except (click.UsageError, harness.ConfigError) as exc:
        message = exc.format_message() if isinstance(exc, click.UsageError) else str(exc)
        click.echo(f"error: {message}", err=True)
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    except (CaseError, ScenarioError, RuntimeError, OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
