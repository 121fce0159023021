"""Episode scenario sampling: system loading, unit commitment and dispatch,
generator set points, shunt states, and a single branch outage.

Every scenario is derived from an independent RNG stream keyed by
(seed, index), so batches can be generated in any order or in parallel
and always reproduce byte-for-byte.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netmodel import NetworkCase, case_fingerprint
from .powerflow import check_connectivity


class ScenarioError(Exception):
    """Scenario generation failed (infeasible case or exhausted redraws)."""


DEFAULT_SETPOINTS = (0.95, 0.975, 1.00, 1.025, 1.05)


@dataclass(frozen=True)
class ScenarioConfig:
    load_scale_range: tuple[float, float] = (0.6, 1.4)
    pf_range: tuple[float, float] = (0.8, 1.0)
    leading_probability: float = 0.10
    loss_fraction: float = 0.03
    setpoint_set: tuple[float, ...] = DEFAULT_SETPOINTS
    # Entries are (from_bus, to_bus) pairs or plain branch indices; None
    # means all in-service branches are outage candidates.
    contingency_branches: tuple | None = None
    contingencies_enabled: bool = False
    # "standard" draws everything per the sampling scheme below;
    # "gridmind" scales each load 80-120% at constant power factor and
    # keeps base-case commitment/set points/shunt states.
    style: str = "standard"
    gridmind_load_range: tuple[float, float] = (0.8, 1.2)
    max_redraws: int = 100

    def __post_init__(self):
        lo, hi = self.load_scale_range
        if not (0 < lo <= hi):
            raise ValueError("load_scale_range must satisfy 0 < lo <= hi")
        for pf in self.pf_range:
            if not (0 < pf <= 1):
                raise ValueError("pf_range values must be in (0, 1]")
        if not (0 <= self.leading_probability <= 1):
            raise ValueError("leading_probability must be in [0, 1]")
        if self.style not in ("standard", "gridmind"):
            raise ValueError(f"unknown scenario style: {self.style!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["load_scale_range"] = list(self.load_scale_range)
        d["pf_range"] = list(self.pf_range)
        d["setpoint_set"] = list(self.setpoint_set)
        d["gridmind_load_range"] = list(self.gridmind_load_range)
        if self.contingency_branches is not None:
            d["contingency_branches"] = [
                list(e) if isinstance(e, (tuple, list)) else e
                for e in self.contingency_branches]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        kw = dict(d)
        for key in ("load_scale_range", "pf_range", "setpoint_set",
                    "gridmind_load_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if kw.get("contingency_branches") is not None:
            kw["contingency_branches"] = tuple(
                tuple(e) if isinstance(e, list) else e
                for e in kw["contingency_branches"])
        return cls(**kw)


@dataclass(frozen=True)
class Scenario:
    """One episode's initialization, dimensioned for a specific case."""
    load_p: np.ndarray            # MW per load record
    load_q: np.ndarray            # MVAr per load record
    gen_on: np.ndarray            # bool per generator
    gen_p: np.ndarray             # MW per generator (0 when off)
    gen_v: np.ndarray             # p.u. set point per generator
    shunt_closed: np.ndarray      # bool per shunt
    outaged_branch: int | None    # branch index, or None
    total_load_p: float

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return (np.array_equal(self.load_p, other.load_p)
                and np.array_equal(self.load_q, other.load_q)
                and np.array_equal(self.gen_on, other.gen_on)
                and np.array_equal(self.gen_p, other.gen_p)
                and np.array_equal(self.gen_v, other.gen_v)
                and np.array_equal(self.shunt_closed, other.shunt_closed)
                and self.outaged_branch == other.outaged_branch
                and self.total_load_p == other.total_load_p)


def rng_for(seed: int, index: int) -> np.random.Generator:
    """Independent per-scenario stream; (seed, index) is the identity."""
    return np.random.default_rng([seed, index])


def sample_loading(case: NetworkCase, config: ScenarioConfig,
                   rng: np.random.Generator):
    """Draw per-load MW/MVAr and the system total.

    Total active load is uniform on load_scale_range x the base-case
    total; each load's share comes from normalized uniform weights; Q
    follows from a per-load power factor, sign-flipped to leading with
    the configured probability.
    """
    if not case.loads:
        raise ScenarioError("case has no loads to sample")
    base_total = case.total_load_p()
    lo, hi = config.load_scale_range
    total = rng.uniform(lo, hi) * base_total
    n = len(case.loads)
    weights = rng.random(n)
    while weights.sum() == 0.0:
        weights = rng.random(n)
    load_p = total * weights / weights.sum()
    pf = rng.uniform(config.pf_range[0], config.pf_range[1], n)
    load_q = load_p * np.tan(np.arccos(pf))
    leading = rng.random(n) < config.leading_probability
    load_q[leading] *= -1.0
    return load_p, load_q, total


def sample_commitment_dispatch(case: NetworkCase, total_load_p: float,
                               config: ScenarioConfig,
                               rng: np.random.Generator):
    """Commit generators in a random order until dispatch covers the load
    plus assumed losses.

    Each visited unit is switched on at a uniform draw within its MW
    limits; the unit that crosses the threshold keeps its draw (the slack
    absorbs the overshoot during the power flow). With zero demand the
    first visited unit is still committed. If the random order leaves the
    slack unit off it is forced on at p_min: the power flow needs an
    in-service slack.
    """
    n = len(case.generators)
    target = (1.0 + config.loss_fraction) * total_load_p
    capacity = sum(g.p_max for g in case.generators)
    if capacity < target:
        raise ScenarioError(
            f"total generator capacity {capacity:.1f} MW cannot cover "
            f"{target:.1f} MW (load plus losses)")
    order = rng.permutation(n)
    gen_on = np.zeros(n, dtype=bool)
    gen_p = np.zeros(n)
    cumulative = 0.0
    for k in order:
        g = case.generators[k]
        gen_on[k] = True
        gen_p[k] = rng.uniform(g.p_min, g.p_max)
        cumulative += gen_p[k]
        if cumulative >= target:
            break
    slack_gi = case.slack_gen_index
    if slack_gi is not None and not gen_on[slack_gi]:
        gen_on[slack_gi] = True
        gen_p[slack_gi] = case.generators[slack_gi].p_min
    return gen_on, gen_p


def resolve_contingencies(case: NetworkCase, config: ScenarioConfig) -> list[int]:
    """Map configured contingency entries (indices or from-to pairs) to
    branch indices; None means every in-service branch."""
    if config.contingency_branches is None:
        return [i for i, br in enumerate(case.branches) if br.in_service]
    out = []
    for entry in config.contingency_branches:
        if isinstance(entry, (tuple, list)):
            f, t = entry
            for i, br in enumerate(case.branches):
                if {br.from_bus, br.to_bus} == {f, t} and br.in_service:
                    out.append(i)
                    break
            else:
                raise ScenarioError(f"no in-service branch {f}-{t} in case")
        else:
            out.append(int(entry))
    return out


def sample_setpoints_shunts_outage(case: NetworkCase, config: ScenarioConfig,
                                   rng: np.random.Generator):
    """Per-generator set points uniform over the discrete set, fair-coin
    shunt states, and one non-islanding branch outage (None when
    contingencies are disabled)."""
    setpoints = np.asarray(config.setpoint_set)
    gen_v = setpoints[rng.integers(0, len(setpoints), len(case.generators))]
    shunt_closed = rng.random(len(case.shunts)) < 0.5

    outaged = None
    if config.contingencies_enabled:
        candidates = resolve_contingencies(case, config)
        if not candidates:
            raise ScenarioError("no outage candidates available")
        for _ in range(config.max_redraws):
            k = candidates[rng.integers(0, len(candidates))]
            branches = list(case.branches)
            branches[k] = dataclasses.replace(branches[k], in_service=False)
            connected, _ = check_connectivity(case.with_updates(branches=branches))
            if connected:
                outaged = k
                break
        else:
            raise ScenarioError(
                "every sampled branch outage islands the network")
    return gen_v, shunt_closed, outaged


def _sample_gridmind(case: NetworkCase, config: ScenarioConfig,
                     rng: np.random.Generator) -> Scenario:
    """Per-load 80-120% scaling at constant power factor; base-case
    commitment scaled linearly to the new total; base set points and
    shunt states."""
    lo, hi = config.gridmind_load_range
    factors = rng.uniform(lo, hi, len(case.loads))
    load_p = np.array([ld.p for ld in case.loads]) * factors
    load_q = np.array([ld.q for ld in case.loads]) * factors
    total = float(load_p.sum())

    base_total = case.total_load_p()
    scale = total / base_total if base_total > 0 else 1.0
    gen_on = np.array([g.in_service for g in case.generators])
    gen_p = np.array([
        np.clip(g.p * scale, g.p_min, g.p_max) if g.in_service else 0.0
        for g in case.generators])
    gen_v = np.array([g.v_setpoint for g in case.generators])
    shunt_closed = np.array([s.closed for s in case.shunts], dtype=bool)

    outaged = None
    if config.contingencies_enabled:
        _, _, outaged = sample_setpoints_shunts_outage(
            case, dataclasses.replace(config, style="standard"), rng)
    return Scenario(load_p, load_q, gen_on, gen_p, gen_v, shunt_closed,
                    outaged, total)


def sample_scenario(case: NetworkCase, config: ScenarioConfig,
                    rng: np.random.Generator) -> Scenario:
    """Draw one full scenario, redrawing the loading when no feasible
    commitment exists (bounded by max_redraws)."""
    if config.style == "gridmind":
        return _sample_gridmind(case, config, rng)
    last_error = None
    for _ in range(config.max_redraws):
        load_p, load_q, total = sample_loading(case, config, rng)
        try:
            gen_on, gen_p = sample_commitment_dispatch(case, total, config, rng)
        except ScenarioError as exc:
            last_error = exc
            continue
        gen_v, shunt_closed, outaged = sample_setpoints_shunts_outage(
            case, config, rng)
        return Scenario(load_p, load_q, gen_on, gen_p, gen_v, shunt_closed,
                        outaged, total)
    raise ScenarioError(f"scenario redraw budget exhausted: {last_error}")


def make_scenario(case: NetworkCase, config: ScenarioConfig, seed: int,
                  index: int) -> Scenario:
    """The (seed, index)-keyed scenario; regenerating with the same key
    reproduces it exactly."""
    return sample_scenario(case, config, rng_for(seed, index))


def apply_scenario(case: NetworkCase, scenario: Scenario) -> NetworkCase:
    """Return a copy of the case with the scenario's loads, commitment,
    dispatch, set points, shunt states, and outage applied. The slack
    generator is always left in service."""
    if (len(scenario.load_p) != len(case.loads)
            or len(scenario.gen_p) != len(case.generators)
            or len(scenario.shunt_closed) != len(case.shunts)):
        raise ValueError("scenario is dimensioned for a different case")
    loads = [dataclasses.replace(ld, p=float(p), q=float(q))
             for ld, p, q in zip(case.loads, scenario.load_p, scenario.load_q)]
    gens = []
    for i, g in enumerate(case.generators):
        on = bool(scenario.gen_on[i]) or g.bus == case.slack_bus
        gens.append(dataclasses.replace(
            g, in_service=on, p=float(scenario.gen_p[i]) if on else 0.0,
            v_setpoint=float(scenario.gen_v[i])))
    shunts = [dataclasses.replace(s, closed=bool(c))
              for s, c in zip(case.shunts, scenario.shunt_closed)]
    branches = list(case.branches)
    if scenario.outaged_branch is not None:
        k = scenario.outaged_branch
        branches[k] = dataclasses.replace(branches[k], in_service=False)
    return case.with_updates(branches=branches, generators=gens,
                             loads=loads, shunts=shunts)


# ---------------------------------------------------------------------------
# Scenario-set manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioManifest:
    """Recipe that regenerates a scenario set exactly: case identity,
    seed, index range, and the sampling configuration."""
    case_name: str
    case_fingerprint: str
    seed: int
    count: int
    config: ScenarioConfig
    start: int = 0

    @property
    def manifest_id(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_dict(),
                                         sort_keys=True).encode()).hexdigest()[:16]

    def indices(self) -> range:
        return range(self.start, self.start + self.count)

    def overlaps(self, other: "ScenarioManifest") -> bool:
        """True if the two sets share any (seed, index) pair for the same
        case and config — the train/test disjointness hazard."""
        if (self.seed != other.seed
                or self.case_fingerprint != other.case_fingerprint
                or self.config != other.config):
            return False
        return (self.start < other.start + other.count
                and other.start < self.start + self.count)

    def to_dict(self) -> dict:
        return {
            "kind": "scenario-manifest",
            "case_name": self.case_name,
            "case_fingerprint": self.case_fingerprint,
            "seed": self.seed,
            "start": self.start,
            "count": self.count,
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioManifest":
        return cls(case_name=d["case_name"],
                   case_fingerprint=d["case_fingerprint"],
                   seed=int(d["seed"]), count=int(d["count"]),
                   start=int(d.get("start", 0)),
                   config=ScenarioConfig.from_dict(d["config"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def materialize(self, case: NetworkCase) -> list[Scenario]:
        if case_fingerprint(case) != self.case_fingerprint:
            raise ScenarioError(
                "manifest was built for a different case revision")
        return [make_scenario(case, self.config, self.seed, i)
                for i in self.indices()]


def make_manifest(case: NetworkCase, config: ScenarioConfig, seed: int,
                  count: int, start: int = 0) -> ScenarioManifest:
    return ScenarioManifest(case_name=case.name,
                            case_fingerprint=case_fingerprint(case),
                            seed=seed, count=count, start=start,
                            config=config)
