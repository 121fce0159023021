"""Voltage-control environment: discrete actions over generator set points
and shunt switches, voltage observations, movement-based rewards, and the
episode termination rules.

The environment owns no randomness — scenarios come from the scenario
module and agents own their exploration streams — so a rollout is fully
determined by (case, scenario sequence, agent behavior).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .netmodel import NetworkCase
from .powerflow import PowerFlowSolution, SolverConfig, solve
from .scenario import DEFAULT_SETPOINTS, Scenario, apply_scenario

OBS_BLOCKS = ("gen", "branch", "shunt")


@dataclass
class EnvConfig:
    observation_set: tuple[str, ...] = ()   # subset of OBS_BLOCKS
    min_max_voltages: bool = True
    reward_scheme: int = 1                   # 1 or 2
    action_cap: int | None = None            # default: 2 * n_generators
    band: tuple[float, float] = (0.95, 1.05)
    failure_bounds: tuple[float, float] = (0.7, 1.2)
    # Reward scheme 1 constants.
    move_scale: float = 100.0        # reward per p.u. of distance removed
    in_band_bonus: float = 1.0       # per bus entering the band
    leave_penalty: float = 1.0       # per bus leaving the band
    action_penalty: float = 0.1      # flat cost of any non-no-op action
    diverge_penalty: float = -10.0
    success_bonus: float = 5.0
    # Voltage changes smaller than this count as "unchanged" (solver noise).
    change_threshold: float = 1e-5

    def __post_init__(self):
        unknown = set(self.observation_set) - set(OBS_BLOCKS)
        if unknown:
            raise ValueError(f"unknown observation blocks: {sorted(unknown)}")
        if self.reward_scheme not in (1, 2):
            raise ValueError("reward_scheme must be 1 or 2")
        if not (self.failure_bounds[0] <= self.band[0]
                and self.band[1] <= self.failure_bounds[1]):
            raise ValueError("band must lie within failure_bounds")


@dataclass(frozen=True)
class Observation:
    values: np.ndarray

    def __array__(self, dtype=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class Action:
    kind: str                    # "no_op" | "gen_setpoint" | "shunt_toggle"
    flat_id: int
    gen_index: int | None = None
    setpoint_index: int | None = None
    shunt_index: int | None = None


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    info: dict


class ActionSpace:
    """Bijection between flat ids and structured commands.

    Layout: id 0 is no-op; ids 1 .. n_g*n_v are generator set points in
    (generator-major, set-point-minor) order; the final n_shunt ids are
    shunt toggles.
    """

    def __init__(self, n_gens: int, setpoints: tuple[float, ...],
                 n_shunts: int):
        self.n_gens = n_gens
        self.setpoints = tuple(setpoints)
        self.n_shunts = n_shunts
        self.size = 1 + n_gens * len(setpoints) + n_shunts

    def decode(self, flat_id: int) -> Action:
        if not (0 <= flat_id < self.size):
            raise ValueError(f"action id {flat_id} outside [0, {self.size})")
        if flat_id == 0:
            return Action("no_op", 0)
        k = flat_id - 1
        n_v = len(self.setpoints)
        if k < self.n_gens * n_v:
            return Action("gen_setpoint", flat_id,
                          gen_index=k // n_v, setpoint_index=k % n_v)
        return Action("shunt_toggle", flat_id,
                      shunt_index=k - self.n_gens * n_v)

    def encode(self, action: Action) -> int:
        if action.kind == "no_op":
            return 0
        if action.kind == "gen_setpoint":
            return 1 + action.gen_index * len(self.setpoints) + action.setpoint_index
        if action.kind == "shunt_toggle":
            return 1 + self.n_gens * len(self.setpoints) + action.shunt_index
        raise ValueError(f"unknown action kind {action.kind!r}")


def band_distance(v: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    """Per-bus distance to the acceptable band (0 inside it)."""
    return np.maximum(0.0, np.maximum(band[0] - v, v - band[1]))


def scale_voltages(v: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    """Min-max scale from the failure bounds onto [0, 1]."""
    lo, hi = bounds
    return (v - lo) / (hi - lo)


def reward_scheme_1(prev: PowerFlowSolution, new: PowerFlowSolution,
                    action: Action, config: EnvConfig) -> float:
    """Movement-based reward: distance-to-band removed (scaled), bonuses
    for buses entering the band, penalties for buses leaving it, and a
    flat cost for any non-no-op action. A failed solve earns exactly the
    divergence penalty; full success adds the success bonus."""
    if not new.converged:
        return config.diverge_penalty
    d_prev = band_distance(prev.v, config.band)
    d_new = band_distance(new.v, config.band)
    reward = config.move_scale * float(np.sum(d_prev - d_new))
    reward += config.in_band_bonus * int(np.sum((d_prev > 0) & (d_new == 0)))
    reward -= config.leave_penalty * int(np.sum((d_prev == 0) & (d_new > 0)))
    if action.kind != "no_op":
        reward -= config.action_penalty
    if not np.any(d_new > 0):
        reward += config.success_bonus
    return reward


def reward_scheme_2(prev: PowerFlowSolution, new: PowerFlowSolution,
                    action: Action, config: EnvConfig) -> float:
    """Clipped ten-value reward. Divergence is -1, full success +1;
    otherwise the net count of buses moving toward minus away from the
    band, graded against thirds of the remaining out-of-band count,
    picks one of +-{0.25, 0.5, 0.75}; a neutral step costs -0.1 unless
    it was a no-op that changed nothing."""
    if not new.converged:
        return -1.0
    d_prev = band_distance(prev.v, config.band)
    d_new = band_distance(new.v, config.band)
    if not np.any(d_new > 0):
        return 1.0
    moved = np.abs(new.v - prev.v) >= config.change_threshold
    m = int(np.sum(moved & (d_new < d_prev))) - int(np.sum(moved & (d_new > d_prev)))
    if m == 0:
        if action.kind == "no_op" and not moved.any():
            return 0.0
        return -0.10
    n = int(np.sum(d_new > 0))
    tier1 = math.ceil(n / 3)
    tier2 = math.ceil(2 * n / 3)
    magnitude = 0.25 if abs(m) <= tier1 else (0.50 if abs(m) <= tier2 else 0.75)
    return magnitude if m > 0 else -magnitude


class VoltageControlEnv:
    """Discrete voltage-control episodes over one network case.

    reset(scenario) applies an episode initialization and solves; step()
    applies one command, re-solves warm-started from the previous
    operating point, and scores the movement. Termination: all voltages
    in band (success), failed solve or any voltage beyond the failure
    bounds (failure), or the per-episode action cap.
    """

    def __init__(self, case: NetworkCase, config: EnvConfig | None = None,
                 solver: SolverConfig | None = None,
                 setpoints: tuple[float, ...] = DEFAULT_SETPOINTS):
        self.case = case
        self.config = config or EnvConfig()
        self.solver = solver or SolverConfig()
        self.setpoints = tuple(setpoints)
        self.action_space = ActionSpace(
            len(case.generators), self.setpoints, len(case.shunts))
        self.action_cap = (self.config.action_cap
                           if self.config.action_cap is not None
                           else 2 * max(len(case.generators), 1))
        self._active = False
        self.working: NetworkCase | None = None
        self.solution: PowerFlowSolution | None = None
        # Episodes start the iteration from the solved base case: a fixed,
        # episode-independent operating point that is a far better initial
        # guess than a flat profile for heavily loaded scenarios (a real
        # grid is re-dispatched from a live state, never from scratch).
        base = solve(case, self.solver)
        self._start = ((base.v, base.theta) if base.converged else (None, None))

    @property
    def n_actions(self) -> int:
        return self.action_space.size

    @property
    def band(self) -> tuple[float, float]:
        return self.config.band

    # -- observations ------------------------------------------------------

    @property
    def observation_size(self) -> int:
        n = self.case.n_buses
        if "gen" in self.config.observation_set:
            n += len(self.case.generators)
        if "branch" in self.config.observation_set:
            n += len(self.case.branches)
        if "shunt" in self.config.observation_set:
            n += len(self.case.shunts)
        return n

    def _observe(self) -> Observation:
        if self.solution is None or not self.solution.converged:
            return Observation(np.zeros(self.observation_size))
        v = self.solution.v
        if self.config.min_max_voltages:
            v = scale_voltages(v, self.config.failure_bounds)
        parts = [v]
        if "gen" in self.config.observation_set:
            parts.append(np.array([1.0 if g.in_service else 0.0
                                   for g in self.working.generators]))
        if "branch" in self.config.observation_set:
            parts.append(np.array([1.0 if b.in_service else 0.0
                                   for b in self.working.branches]))
        if "shunt" in self.config.observation_set:
            parts.append(np.array([1.0 if s.closed else 0.0
                                   for s in self.working.shunts]))
        return Observation(np.concatenate(parts) if len(parts) > 1 else parts[0])

    # -- episode control ----------------------------------------------------

    def reset(self, scenario: Scenario) -> Observation:
        self.working = apply_scenario(self.case, scenario)
        self.solution = solve(self.working, self.solver,
                              v0=self._start[0], theta0=self._start[1])
        self.action_count = 0
        self._active = True
        self.dead_on_arrival = not self._state_ok(self.solution)
        d = (band_distance(self.solution.v, self.config.band)
             if self.solution.converged else None)
        self.already_in_band = (not self.dead_on_arrival
                                and not np.any(d > 0))
        self._last_obs = self._observe()
        return self._last_obs

    def _state_ok(self, sol: PowerFlowSolution) -> bool:
        if not sol.converged:
            return False
        lo, hi = self.config.failure_bounds
        return bool(np.all(sol.v >= lo) and np.all(sol.v <= hi))

    def _failure_reward(self) -> float:
        return (self.config.diverge_penalty if self.config.reward_scheme == 1
                else -1.0)

    def _success_reward(self) -> float:
        return (self.config.success_bonus if self.config.reward_scheme == 1
                else 1.0)

    def step(self, action: int | Action) -> StepResult:
        if not self._active:
            raise RuntimeError("step() called on a finished episode; "
                               "call reset() first")
        if isinstance(action, (int, np.integer)):
            action = self.action_space.decode(int(action))
        self.action_count += 1

        if self.dead_on_arrival:
            self._active = False
            return StepResult(self._last_obs, self._failure_reward(), True,
                              self._info(all_in_band=False, diverged=True,
                                         oob=None, is_success=False))
        if self.already_in_band:
            self._active = False
            return StepResult(self._last_obs, self._success_reward(), True,
                              self._info(all_in_band=True, diverged=False,
                                         oob=0, is_success=True))

        prev = self.solution
        self._apply(action)
        new = solve(self.working, self.solver, v0=prev.v, theta0=prev.theta)

        if not self._state_ok(new):
            # Failed solve, or voltages beyond the failure bounds (treated
            # as a failed power flow): terminal, scored as divergence; the
            # observation stays at the last valid one.
            oob = (int(np.sum(band_distance(new.v, self.config.band) > 0))
                   if new.converged else None)
            self.solution = prev
            self._active = False
            return StepResult(self._last_obs, self._failure_reward(), True,
                              self._info(all_in_band=False, diverged=True,
                                         oob=oob, is_success=False))

        reward_fn = reward_scheme_1 if self.config.reward_scheme == 1 else reward_scheme_2
        reward = reward_fn(prev, new, action, self.config)
        self.solution = new
        d = band_distance(new.v, self.config.band)
        all_in = not np.any(d > 0)
        done = all_in or self.action_count >= self.action_cap
        self._active = not done
        self._last_obs = self._observe()
        return StepResult(self._last_obs, reward, done,
                          self._info(all_in_band=all_in, diverged=False,
                                     oob=int(np.sum(d > 0)),
                                     is_success=all_in if done else None))

    def _apply(self, action: Action) -> None:
        if action.kind == "no_op":
            return
        if action.kind == "gen_setpoint":
            gens = list(self.working.generators)
            g = gens[action.gen_index]
            gens[action.gen_index] = dataclasses.replace(
                g, v_setpoint=self.setpoints[action.setpoint_index])
            self.working = self.working.with_updates(generators=gens)
        elif action.kind == "shunt_toggle":
            shunts = list(self.working.shunts)
            s = shunts[action.shunt_index]
            shunts[action.shunt_index] = dataclasses.replace(
                s, closed=not s.closed)
            self.working = self.working.with_updates(shunts=shunts)
        else:
            raise ValueError(f"unknown action kind {action.kind!r}")

    def _info(self, all_in_band, diverged, oob, is_success) -> dict:
        info = {
            "all_in_band": all_in_band,
            "diverged": diverged,
            "oob_bus_count": oob,
            "action_count_this_episode": self.action_count,
            "already_in_band": self.already_in_band,
            "dead_on_arrival": self.dead_on_arrival,
        }
        if is_success is not None:
            info["is_success"] = is_success
        return info


class GridMindEnv:
    """Joint set-point environment: each action assigns a voltage set
    point to every generator at once, so the action space has
    n_setpoints ** n_generators entries. Rewards are the three-tier
    band scheme (+100 / -50 / -100) plus an end-of-episode bonus equal
    to the mean of the episode's step rewards.
    """

    MAX_ACTIONS = 200_000

    def __init__(self, case: NetworkCase, solver: SolverConfig | None = None,
                 setpoints: tuple[float, ...] = DEFAULT_SETPOINTS,
                 action_cap: int | None = None,
                 band: tuple[float, float] = (0.95, 1.05),
                 outer_band: tuple[float, float] = (0.8, 1.25)):
        n_actions = len(setpoints) ** len(case.generators)
        if n_actions > self.MAX_ACTIONS:
            raise ValueError(
                f"joint set-point action space has {n_actions} entries; "
                f"cap is {self.MAX_ACTIONS}")
        self.case = case
        self.solver = solver or SolverConfig()
        self.setpoints = tuple(setpoints)
        self.band = band
        self.outer_band = outer_band
        self.action_cap = action_cap or 2 * max(len(case.generators), 1)
        self.n_actions = n_actions
        self._active = False
        base = solve(case, self.solver)
        self._start = ((base.v, base.theta) if base.converged else (None, None))

    @property
    def observation_size(self) -> int:
        return self.case.n_buses

    def decode(self, flat_id: int) -> tuple[float, ...]:
        """flat id -> one set point per generator (last generator varies
        fastest)."""
        if not (0 <= flat_id < self.n_actions):
            raise ValueError(f"action id {flat_id} outside [0, {self.n_actions})")
        n_v = len(self.setpoints)
        out = []
        for _ in range(len(self.case.generators)):
            out.append(self.setpoints[flat_id % n_v])
            flat_id //= n_v
        return tuple(reversed(out))

    def reset(self, scenario: Scenario) -> Observation:
        self.working = apply_scenario(self.case, scenario)
        self.solution = solve(self.working, self.solver,
                              v0=self._start[0], theta0=self._start[1])
        self.action_count = 0
        self.rewards: list[float] = []
        self._active = True
        self.dead_on_arrival = not self.solution.converged
        self.already_in_band = (self.solution.converged and not np.any(
            band_distance(self.solution.v, self.band) > 0))
        self._last_obs = Observation(
            self.solution.v.copy() if self.solution.converged
            else np.zeros(self.case.n_buses))
        return self._last_obs

    def _tier_reward(self, v: np.ndarray) -> float:
        if not np.any(band_distance(v, self.band) > 0):
            return 100.0
        if np.any(v < self.outer_band[0]) or np.any(v > self.outer_band[1]):
            return -100.0
        return -50.0

    def step(self, action: int) -> StepResult:
        if not self._active:
            raise RuntimeError("step() called on a finished episode")
        self.action_count += 1

        if self.dead_on_arrival:
            reward = -100.0
            self.rewards.append(reward)
            reward += float(np.mean(self.rewards))
            self._active = False
            return StepResult(self._last_obs, reward, True,
                              {"all_in_band": False, "diverged": True,
                               "is_success": False,
                               "already_in_band": False,
                               "dead_on_arrival": True,
                               "action_count_this_episode": self.action_count})
        if self.already_in_band:
            reward = 100.0
            self.rewards.append(reward)
            reward += float(np.mean(self.rewards))
            self._active = False
            return StepResult(self._last_obs, reward, True,
                              {"all_in_band": True, "diverged": False,
                               "is_success": True,
                               "already_in_band": True,
                               "dead_on_arrival": False,
                               "action_count_this_episode": self.action_count})

        targets = self.decode(action)
        gens = [dataclasses.replace(g, v_setpoint=t)
                for g, t in zip(self.working.generators, targets)]
        self.working = self.working.with_updates(generators=gens)
        prev = self.solution
        new = solve(self.working, self.solver, v0=prev.v, theta0=prev.theta)

        if not new.converged:
            reward = -100.0
            self.rewards.append(reward)
            reward += float(np.mean(self.rewards))
            self._active = False
            return StepResult(self._last_obs, reward, True,
                              {"all_in_band": False, "diverged": True,
                               "is_success": False,
                               "already_in_band": False,
                               "dead_on_arrival": False,
                               "action_count_this_episode": self.action_count})

        self.solution = new
        self._last_obs = Observation(new.v.copy())
        reward = self._tier_reward(new.v)
        self.rewards.append(reward)
        all_in = reward == 100.0
        done = all_in or self.action_count >= self.action_cap
        if done:
            reward += float(np.mean(self.rewards))
            self._active = False
        return StepResult(self._last_obs, reward, done,
                          {"all_in_band": all_in, "diverged": False,
                           "is_success": all_in if done else None,
                           "already_in_band": False,
                           "dead_on_arrival": False,
                           "action_count_this_episode": self.action_count})
