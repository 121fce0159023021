"""Experiment orchestration: YAML experiment configs, seeded training and
evaluation pipelines, side-by-side comparisons, and the grouped result
rows averaged across seeds.

Outputs follow one convention: each pipeline writes machine-readable
delimited/JSON files and a rendered figure into its output directory, and
every report embeds the config fingerprint and test-manifest id it was
produced from.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import report
from .agents import (DqnConfig, DqnPolicy, DqnTrainer, EvalResult, GraphAgent,
                     RandomAgent, ScenarioEpisodes, evaluate)
from .env import EnvConfig, GridMindEnv, VoltageControlEnv
from .netmodel import NetworkCase, case_fingerprint, load_case
from .nn import load_params
from .powerflow import SolverConfig
from .scenario import (ScenarioConfig, ScenarioManifest, make_manifest)

AGENT_KINDS = ("dqn", "random", "graph")


class ConfigError(Exception):
    """Bad experiment configuration; message carries file and field."""


@dataclass
class ExperimentConfig:
    case: str
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    agent: str = "dqn"
    dqn: DqnConfig = field(default_factory=DqnConfig)
    total_steps: int = 50_000
    seeds: tuple[int, ...] = (0, 1, 2)
    n_test_episodes: int = 500
    test_seed: int = 900_000
    gridmind: bool = False

    def __post_init__(self):
        if self.agent not in AGENT_KINDS:
            raise ConfigError(f"agent must be one of {AGENT_KINDS}, "
                              f"got {self.agent!r}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.test_seed in self.seeds:
            raise ConfigError(
                f"test_seed {self.test_seed} collides with a training seed; "
                "train and test scenario streams must be disjoint")

    def fingerprint(self) -> str:
        blob = json.dumps(_config_dict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _config_dict(cfg: ExperimentConfig) -> dict:
    return {
        "case": cfg.case,
        "scenario": cfg.scenario.to_dict(),
        "env": dataclasses.asdict(cfg.env),
        "solver": dataclasses.asdict(cfg.solver),
        "agent": cfg.agent,
        "dqn": dataclasses.asdict(cfg.dqn),
        "total_steps": cfg.total_steps,
        "seeds": list(cfg.seeds),
        "n_test_episodes": cfg.n_test_episodes,
        "test_seed": cfg.test_seed,
        "gridmind": cfg.gridmind,
    }


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a YAML experiment file into an ExperimentConfig, reporting
    the offending file and field on any error."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file")
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return config_from_dict(doc, source=str(path))


def config_from_dict(doc: dict, source: str = "<config>") -> ExperimentConfig:
    def build(section: str, cls):
        data = dict(doc.get(section) or {})
        try:
            if cls is ScenarioConfig:
                return ScenarioConfig.from_dict(data)
            return cls(**_tuplify(cls, data))
        except TypeError as exc:
            raise ConfigError(f"{source}: section '{section}': {exc}")
        except ValueError as exc:
            raise ConfigError(f"{source}: section '{section}': {exc}")

    known = {"case", "scenario", "env", "solver", "agent", "dqn", "train",
             "eval", "gridmind"}
    unknown = doc.keys() - known
    if unknown:
        raise ConfigError(f"{source}: unknown config sections {sorted(unknown)}")
    if "case" not in doc:
        raise ConfigError(f"{source}: missing required field 'case'")

    train = doc.get("train") or {}
    ev = doc.get("eval") or {}
    for sec_name, sec, allowed in (
            ("train", train, {"total_steps", "seeds"}),
            ("eval", ev, {"n_test_episodes", "test_seed"})):
        bad = sec.keys() - allowed
        if bad:
            raise ConfigError(f"{source}: section '{sec_name}': unknown "
                              f"fields {sorted(bad)} (allowed: {sorted(allowed)})")
    try:
        return ExperimentConfig(
            case=str(doc["case"]),
            scenario=build("scenario", ScenarioConfig),
            env=build("env", EnvConfig),
            solver=build("solver", SolverConfig),
            agent=str(doc.get("agent", "dqn")),
            dqn=build("dqn", DqnConfig),
            total_steps=int(train.get("total_steps", 50_000)),
            seeds=tuple(int(s) for s in train.get("seeds", (0, 1, 2))),
            n_test_episodes=int(ev.get("n_test_episodes", 500)),
            test_seed=int(ev.get("test_seed", 900_000)),
            gridmind=bool(doc.get("gridmind", False)),
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}")


def _tuplify(cls, data: dict) -> dict:
    """YAML lists -> tuples where the dataclass field expects one."""
    out = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in out and isinstance(out[f.name], list):
            out[f.name] = tuple(
                tuple(e) if isinstance(e, list) else e for e in out[f.name])
    return out


def resolve_case_path(name: str) -> tuple[Path, str]:
    """Resolve a case reference to (path, format).

    Accepts a filesystem path, a file in $VOLTGRID_CASE_DIR, or the name
    of a bundled case (ieee14, syn200, syn500). Format follows the
    extension: .m is MATPOWER-style, anything else native.
    """
    candidates = [Path(name)]
    env_dir = os.environ.get("VOLTGRID_CASE_DIR")
    if env_dir:
        candidates.append(Path(env_dir) / name)
        candidates += [Path(env_dir) / f"{name}{ext}" for ext in (".json", ".m")]
    from importlib import resources
    bundled = resources.files("voltgrid.cases")
    candidates += [Path(str(bundled / f"{name}{ext}")) for ext in ("", ".json", ".m")]
    for cand in candidates:
        if cand.is_file():
            fmt = "matpower" if cand.suffix == ".m" else "native"
            return cand, fmt
    raise ConfigError(f"case {name!r} not found (looked at {len(candidates)} "
                      "locations; set VOLTGRID_CASE_DIR or pass a path)")


def load_experiment_case(cfg: ExperimentConfig) -> NetworkCase:
    path, fmt = resolve_case_path(cfg.case)
    return load_case(path, format=fmt)


def build_env(cfg: ExperimentConfig, case: NetworkCase):
    if cfg.gridmind:
        return GridMindEnv(case, solver=cfg.solver,
                           setpoints=cfg.scenario.setpoint_set,
                           action_cap=cfg.env.action_cap)
    return VoltageControlEnv(case, cfg.env, solver=cfg.solver,
                             setpoints=cfg.scenario.setpoint_set)


# ---------------------------------------------------------------------------
# Training pipeline
# ---------------------------------------------------------------------------

def run_training(cfg: ExperimentConfig, seed: int, out_dir: str | Path,
                 resume: str | Path | None = None,
                 total_steps: int | None = None) -> dict:
    """Train one DQN run; writes checkpoint, resume sidecar, per-episode
    reward series (CSV with a sliding-window mean column), and the
    rendered training curve. Returns a manifest of what was written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total = total_steps or cfg.total_steps

    if resume is not None:
        trainer = DqnTrainer.restore(resume, cfg.dqn, total)
    else:
        case = load_experiment_case(cfg)
        env = build_env(cfg, case)
        source = ScenarioEpisodes(env, cfg.scenario, seed)
        trainer = DqnTrainer(source, cfg.dqn, total, seed)
    trainer.run(checkpoint_dir=out if cfg.dqn.checkpoint_every else None)

    prefix = out / f"dqn_seed{seed}"
    params_path, sidecar_path = trainer.save_checkpoint(prefix)

    rewards = [r.reward for r in trainer.log]
    sliding = report.sliding_mean(rewards, 100)
    rows = [
        (r.episode, r.end_step, r.steps, f"{r.reward:.6f}",
         int(r.success), int(r.already_in_band), int(r.dead_on_arrival),
         f"{s:.6f}")
        for r, s in zip(trainer.log, sliding)
    ]
    episodes_csv = report.write_csv(
        out / f"episodes_seed{seed}.csv",
        ["episode", "end_step", "steps", "reward", "success",
         "already_in_band", "dead_on_arrival", "reward_sliding100"], rows)
    curve_png = report.training_curve_figure(
        rewards, out / f"training_curve_seed{seed}.png",
        title=f"{cfg.case} seed {seed}")

    manifest = {
        "kind": "training-run",
        "config_fingerprint": cfg.fingerprint(),
        "seed": seed,
        "total_steps": trainer.total_steps,
        "episodes": len(trainer.log),
        "successes": int(sum(r.success for r in trainer.log)),
        "checkpoint": str(params_path),
        "sidecar": str(sidecar_path),
        "episodes_csv": str(episodes_csv),
        "training_curve": str(curve_png),
    }
    (out / f"train_seed{seed}.json").write_text(
        json.dumps(manifest, indent=1) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# Evaluation pipeline
# ---------------------------------------------------------------------------

def test_manifest_for(cfg: ExperimentConfig,
                      case: NetworkCase) -> ScenarioManifest:
    return make_manifest(case, cfg.scenario, cfg.test_seed,
                         cfg.n_test_episodes)


def check_disjoint(cfg: ExperimentConfig, manifest: ScenarioManifest) -> None:
    """Refuse evaluation when the test manifest's scenario stream could
    overlap any training stream (same seed namespace)."""
    if manifest.seed in cfg.seeds:
        raise ConfigError(
            f"test manifest seed {manifest.seed} is also a training seed; "
            "the two scenario streams would overlap")


def make_policy(kind: str, cfg: ExperimentConfig,
                checkpoint: str | Path | None, seed: int):
    if kind == "dqn":
        if checkpoint is None:
            raise ConfigError("dqn evaluation requires a checkpoint")
        params = load_params(checkpoint)
        return DqnPolicy(params,
                         unique_actions=cfg.dqn.unique_actions_per_episode)
    if kind == "random":
        return RandomAgent(np.random.default_rng([seed, 0xA5]),
                           unique_actions=cfg.dqn.unique_actions_per_episode)
    if kind == "graph":
        return GraphAgent()
    raise ConfigError(f"unknown agent kind {kind!r}")


def run_eval(cfg: ExperimentConfig, agent_kind: str,
             checkpoint: str | Path | None = None, seed: int = 0,
             out_dir: str | Path | None = None,
             manifest: ScenarioManifest | None = None,
             case: NetworkCase | None = None) -> dict:
    """Evaluate one agent on the shared test manifest; returns the report
    dict (and writes report JSON + per-episode CSV when out_dir given)."""
    case = case or load_experiment_case(cfg)
    manifest = manifest or test_manifest_for(cfg, case)
    check_disjoint(cfg, manifest)
    env = build_env(cfg, case)
    scenarios = manifest.materialize(case)
    policy = make_policy(agent_kind, cfg, checkpoint, seed)
    result = evaluate(policy, env, scenarios)
    rep = report_dict(cfg, manifest, agent_kind, seed, result,
                      checkpoint=checkpoint)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tag = f"{agent_kind}_seed{seed}"
        (out / f"report_{tag}.json").write_text(
            json.dumps(rep, indent=1) + "\n")
        report.write_csv(
            out / f"episodes_{tag}.csv",
            ["episode", "init_solved", "initial_oob", "already_in_band",
             "success", "steps", "reward", "actions"],
            [(r.index, int(r.init_solved), int(r.initial_oob),
              int(r.already_in_band), int(r.success), r.steps,
              f"{r.reward:.6f}", " ".join(map(str, r.actions)))
             for r in result.records])
    return rep


def report_dict(cfg: ExperimentConfig, manifest: ScenarioManifest,
                agent_kind: str, seed: int, result: EvalResult,
                checkpoint=None) -> dict:
    return {
        "kind": "eval-report",
        "agent": agent_kind,
        "seed": seed,
        "ps": round(result.ps, 4),
        "psoobv": round(result.psoobv, 4),
        "mean_reward": round(result.mean_reward, 6),
        "mean_actions_per_success": (
            round(result.mean_actions_per_success, 4)
            if result.records and not np.isnan(result.mean_actions_per_success)
            else None),
        "n_episodes": len(result.records),
        "n_initial_oob": int(sum(r.initial_oob for r in result.records)),
        "n_dead_on_arrival": int(sum(not r.init_solved for r in result.records)),
        "n_already_in_band": int(sum(r.already_in_band for r in result.records)),
        "manifest_id": manifest.manifest_id,
        "config_fingerprint": cfg.fingerprint(),
        "checkpoint": str(checkpoint) if checkpoint else None,
    }


# ---------------------------------------------------------------------------
# Compare and grouped-rows pipelines
# ---------------------------------------------------------------------------

def run_compare(cfg: ExperimentConfig, agent_specs: list[tuple[str, str | None]],
                out_dir: str | Path, seeds: tuple[int, ...] | None = None) -> list[dict]:
    """Evaluate several agents on the identical test manifest.

    agent_specs entries are (kind, checkpoint-or-None). Every row shares
    the manifest id; mixing manifests is refused upstream. Writes the
    side-by-side CSV and a grouped-bar figure, and warns (without
    failing) when the graph agent does not beat the random agent."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    case = load_experiment_case(cfg)
    manifest = test_manifest_for(cfg, case)
    seeds = seeds or (cfg.seeds[0],)
    rows = []
    for kind, checkpoint in agent_specs:
        for seed in seeds:
            rows.append(run_eval(cfg, kind, checkpoint=checkpoint, seed=seed,
                                 out_dir=out, manifest=manifest, case=case))
    report.write_csv(
        out / "compare.csv",
        ["agent", "seed", "ps", "psoobv", "mean_reward",
         "mean_actions_per_success", "n_episodes", "manifest_id",
         "config_fingerprint"],
        [(r["agent"], r["seed"], r["ps"], r["psoobv"], r["mean_reward"],
          r["mean_actions_per_success"], r["n_episodes"], r["manifest_id"],
          r["config_fingerprint"]) for r in rows])
    report.compare_figure(rows, out / "compare_psoobv.png",
                          title=f"{cfg.case}: OOB success rate")

    by_agent = {r["agent"]: r["psoobv"] for r in rows}
    if "graph" in by_agent and "random" in by_agent:
        if by_agent["graph"] < by_agent["random"]:
            print("warning: graph agent PSOOBV "
                  f"({by_agent['graph']:.1f}) below random agent "
                  f"({by_agent['random']:.1f}); expected the opposite")
    return rows


OBSERVATION_GROUPS = {
    "voltage": (),
    "voltage+gen": ("gen",),
    "voltage+branch": ("branch",),
    "voltage+gen+branch": ("gen", "branch"),
    "voltage+gen+branch+shunt": ("gen", "branch", "shunt"),
}


def run_table1_row(cfg: ExperimentConfig, observations: str, uae: bool,
                   mmv: bool, rs: int, out_dir: str | Path,
                   scale: float = 1.0) -> dict:
    """Train and evaluate one (observations, UAE, MMV, RS) combination
    for every configured seed and average the success metrics into one
    grouped-result row."""
    if observations not in OBSERVATION_GROUPS:
        raise ConfigError(f"unknown observation group {observations!r} "
                          f"(choose from {sorted(OBSERVATION_GROUPS)})")
    if not (0 < scale <= 1):
        raise ConfigError("scale must be in (0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    row_cfg = dataclasses.replace(
        cfg,
        env=dataclasses.replace(cfg.env,
                                observation_set=OBSERVATION_GROUPS[observations],
                                min_max_voltages=mmv,
                                reward_scheme=rs),
        dqn=dataclasses.replace(cfg.dqn, unique_actions_per_episode=uae),
        total_steps=max(1, int(cfg.total_steps * scale)),
        n_test_episodes=max(1, int(cfg.n_test_episodes * scale)),
    )
    case = load_experiment_case(row_cfg)
    manifest = test_manifest_for(row_cfg, case)

    reports = []
    for seed in row_cfg.seeds:
        train_info = run_training(row_cfg, seed, out)
        reports.append(run_eval(row_cfg, "dqn",
                                checkpoint=train_info["checkpoint"],
                                seed=seed, out_dir=out, manifest=manifest,
                                case=case))
    row = {
        "observations": observations,
        "uae": "Yes" if uae else "No",
        "mmv": "Yes" if mmv else "No",
        "rs": rs,
        "ps": round(float(np.mean([r["ps"] for r in reports])), 2),
        "psoobv": round(float(np.mean([r["psoobv"] for r in reports])), 2),
        "seeds": list(row_cfg.seeds),
        "per_seed": reports,
        "manifest_id": manifest.manifest_id,
        "config_fingerprint": row_cfg.fingerprint(),
    }
    report.write_csv(
        out / "row.csv",
        ["observations", "uae", "mmv", "rs", "ps", "psoobv", "seeds",
         "manifest_id"],
        [(row["observations"], row["uae"], row["mmv"], row["rs"], row["ps"],
          row["psoobv"], " ".join(map(str, row["seeds"])), row["manifest_id"])])
    (out / "row.json").write_text(json.dumps(row, indent=1) + "\n")
    print(f"{observations:<24} UAE={row['uae']:<3} MMV={row['mmv']:<3} "
          f"RS={rs}  PS={row['ps']:<6} PSOOBV={row['psoobv']}")
    return row
