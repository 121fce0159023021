"""Agents: the DQN (double targets, dueling head, prioritized replay,
epsilon-greedy with the unique-actions-per-episode rule) plus random and
graph-based baselines, and the evaluation loop they all share.

Training environments are duck-typed: anything exposing reset() -> obs,
step(action) -> StepResult, n_actions, and observation_size works, which
is how the test suite drives the trainer on toy MDPs.
"""

from __future__ import annotations

import heapq
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .env import Action, Observation, StepResult, band_distance
from .netmodel import NetworkCase
from .replay import PrioritizedReplayBuffer
from .scenario import Scenario, ScenarioConfig, make_scenario


class AllActionsMaskedError(Exception):
    """Every action is masked; unreachable under default caps but guarded."""


@dataclass
class DqnConfig:
    gamma: float = 0.99
    learning_rate: float = 5e-4
    buffer_capacity: int = 50_000
    batch_size: int = 32
    learning_starts: int = 1_000
    train_frequency: int = 1
    target_sync: int = 500
    epsilon_start: float = 1.0
    epsilon_final: float = 0.02
    epsilon_fraction: float = 0.10      # of total steps
    priority_alpha: float = 0.6
    beta_start: float = 0.4
    beta_final: float = 1.0
    priority_floor: float = 1e-6
    unique_actions_per_episode: bool = True
    hidden: tuple[int, ...] = (64, 64)
    dueling: bool = True
    checkpoint_every: int = 0           # steps; 0 disables periodic saves

    def __post_init__(self):
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must be in (0, 1]")
        for e in (self.epsilon_start, self.epsilon_final):
            if not (0 <= e <= 1):
                raise ValueError("epsilon must be in [0, 1]")

    def epsilon(self, step: int, total_steps: int) -> float:
        horizon = max(1, int(self.epsilon_fraction * total_steps))
        frac = min(step / horizon, 1.0)
        return self.epsilon_start + frac * (self.epsilon_final - self.epsilon_start)

    def beta(self, step: int, total_steps: int) -> float:
        frac = min(step / max(total_steps, 1), 1.0)
        return self.beta_start + frac * (self.beta_final - self.beta_start)


def select_action(q_values: np.ndarray, mask: set[int], epsilon: float,
                  rng: np.random.Generator | None,
                  unique_actions: bool = True) -> int:
    """Masked epsilon-greedy selection.

    With probability epsilon the choice is uniform over unmasked actions;
    otherwise it is the highest-valued unmasked action (ties broken by
    lowest id), i.e. when the best action is already taken this episode
    the next-best untaken one is chosen, and so on down the ranking. The
    chosen id is added to the mask when unique_actions is on; with it off
    the mask is ignored entirely.
    """
    n = len(q_values)
    if unique_actions and mask:
        unmasked = [i for i in range(n) if i not in mask]
    else:
        unmasked = list(range(n))
    if not unmasked:
        raise AllActionsMaskedError(
            f"all {n} actions already taken this episode")
    if epsilon > 0 and rng is not None and rng.random() < epsilon:
        choice = int(unmasked[rng.integers(len(unmasked))])
    else:
        choice = min(unmasked, key=lambda i: (-q_values[i], i))
    if unique_actions:
        mask.add(choice)
    return choice


def compute_targets(batch: dict, online: nn.Parameters,
                    target: nn.Parameters, gamma: float) -> np.ndarray:
    """Double-DQN targets: y = r for terminal transitions, else
    y = r + gamma * Q_target(s', argmax_a Q_online(s', a)). The argmax
    runs over the full action set (episode masks do not apply here)."""
    q_online_next = nn.forward(online, batch["next_obs"])
    best = np.argmax(q_online_next, axis=1)
    q_target_next = nn.forward(target, batch["next_obs"])
    bootstrap = q_target_next[np.arange(len(best)), best]
    return batch["rewards"] + gamma * (~batch["dones"]) * bootstrap


@dataclass
class EpisodeRecord:
    episode: int
    end_step: int
    steps: int
    reward: float
    success: bool
    already_in_band: bool
    dead_on_arrival: bool


class ScenarioEpisodes:
    """Endless episode source feeding an environment from the
    (seed, index)-keyed scenario stream; the index advances on reset, so
    the whole run is reproducible from (case, config, seed)."""

    def __init__(self, env, scenario_config: ScenarioConfig, seed: int,
                 start_index: int = 0):
        self.env = env
        self.scenario_config = scenario_config
        self.seed = seed
        self.index = start_index

    @property
    def n_actions(self) -> int:
        return self.env.n_actions

    @property
    def observation_size(self) -> int:
        return self.env.observation_size

    def reset(self) -> Observation:
        scenario = make_scenario(self.env.case, self.scenario_config,
                                 self.seed, self.index)
        self.index += 1
        return self.env.reset(scenario)

    def step(self, action: int) -> StepResult:
        return self.env.step(action)


class DqnTrainer:
    """Owns the full training loop and every piece of mutable state, so a
    checkpoint + sidecar restores a run mid-episode bit-for-bit."""

    def __init__(self, env, config: DqnConfig, total_steps: int, seed: int):
        self.env = env
        self.config = config
        self.total_steps = total_steps
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.spec = nn.MlpSpec(input_dim=env.observation_size,
                               hidden=config.hidden,
                               n_actions=env.n_actions,
                               dueling=config.dueling)
        self.online = nn.Parameters.init(self.spec, self.rng)
        self.target = self.online.copy()
        self.adam = nn.AdamState(self.online)
        self.buffer = PrioritizedReplayBuffer(
            config.buffer_capacity, env.observation_size,
            config.priority_alpha, self.rng)
        self.step_count = 0
        self.episode_count = 0
        self.log: list[EpisodeRecord] = []
        self._obs: Observation | None = None
        self._mask: set[int] = set()
        self._episode_reward = 0.0
        self._episode_steps = 0

    def run(self, checkpoint_dir: str | Path | None = None) -> None:
        """Advance to total_steps (resumable: picks up where it left off)."""
        cfg = self.config
        if self._obs is None:
            self._obs = self.env.reset()
            self._mask = set()
        while self.step_count < self.total_steps:
            t = self.step_count
            epsilon = cfg.epsilon(t, self.total_steps)
            q = nn.forward(self.online, self._obs.values[None, :])[0]
            action = select_action(q, self._mask, epsilon, self.rng,
                                   cfg.unique_actions_per_episode)
            result = self.env.step(action)
            self.buffer.add(self._obs.values, action, result.reward,
                            result.observation.values, result.done)
            self._obs = result.observation
            self._episode_reward += result.reward
            self._episode_steps += 1
            self.step_count += 1

            if (self.step_count >= cfg.learning_starts
                    and len(self.buffer) >= cfg.batch_size
                    and self.step_count % cfg.train_frequency == 0):
                self._learn()
            if self.step_count % cfg.target_sync == 0:
                self.target.copy_from(self.online)

            if result.done:
                info = result.info
                self.log.append(EpisodeRecord(
                    episode=self.episode_count, end_step=self.step_count,
                    steps=self._episode_steps, reward=self._episode_reward,
                    success=bool(info.get("is_success", False)),
                    already_in_band=bool(info.get("already_in_band", False)),
                    dead_on_arrival=bool(info.get("dead_on_arrival", False))))
                self.episode_count += 1
                self._episode_reward = 0.0
                self._episode_steps = 0
                if self.step_count < self.total_steps:
                    self._obs = self.env.reset()
                    self._mask = set()

            if (cfg.checkpoint_every and checkpoint_dir
                    and self.step_count % cfg.checkpoint_every == 0):
                self.save_checkpoint(
                    Path(checkpoint_dir) / f"step{self.step_count:08d}")

    def _learn(self) -> None:
        cfg = self.config
        beta = cfg.beta(self.step_count, self.total_steps)
        batch = self.buffer.sample(cfg.batch_size, beta)
        targets = compute_targets(batch, self.online, self.target, cfg.gamma)
        grads, td_errors, loss = nn.backward(
            self.online, batch["obs"], batch["weights"], batch["actions"],
            targets)
        if not np.isfinite(loss):
            raise RuntimeError(
                f"non-finite loss at step {self.step_count}: {loss}")
        nn.adam_step(self.online, grads, self.adam, cfg.learning_rate)
        self.buffer.update_priorities(
            batch["indices"], np.abs(td_errors) + cfg.priority_floor)

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, prefix: str | Path) -> tuple[Path, Path]:
        """Writes <prefix>.params (portable network weights) and
        <prefix>.sidecar (full resume state)."""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        params_path = prefix.with_suffix(".params")
        sidecar_path = prefix.with_suffix(".sidecar")
        nn.save_params(self.online, params_path)
        state = {
            "step_count": self.step_count,
            "episode_count": self.episode_count,
            "total_steps": self.total_steps,
            "seed": self.seed,
            "log": self.log,
            "online": [a.copy() for a in self.online.arrays],
            "target": [a.copy() for a in self.target.arrays],
            "adam": {"m": [a.copy() for a in self.adam.m],
                     "v": [a.copy() for a in self.adam.v],
                     "t": self.adam.t},
            "buffer": self.buffer.state_dict(),
            "rng_state": self.rng.bit_generator.state,
            "env": self.env,
            "obs": self._obs,
            "mask": set(self._mask),
            "episode_reward": self._episode_reward,
            "episode_steps": self._episode_steps,
        }
        with open(sidecar_path, "wb") as f:
            pickle.dump(state, f)
        return params_path, sidecar_path

    @classmethod
    def restore(cls, sidecar_path: str | Path, config: DqnConfig,
                total_steps: int | None = None) -> "DqnTrainer":
        with open(sidecar_path, "rb") as f:
            state = pickle.load(f)
        trainer = cls(state["env"], config,
                      total_steps or state["total_steps"], state["seed"])
        trainer.step_count = state["step_count"]
        trainer.episode_count = state["episode_count"]
        trainer.log = list(state["log"])
        for a, saved in zip(trainer.online.arrays, state["online"]):
            a[...] = saved
        for a, saved in zip(trainer.target.arrays, state["target"]):
            a[...] = saved
        for a, saved in zip(trainer.adam.m, state["adam"]["m"]):
            a[...] = saved
        for a, saved in zip(trainer.adam.v, state["adam"]["v"]):
            a[...] = saved
        trainer.adam.t = state["adam"]["t"]
        trainer.buffer.load_state_dict(state["buffer"])
        trainer.rng.bit_generator.state = state["rng_state"]
        trainer._obs = state["obs"]
        trainer._mask = set(state["mask"])
        trainer._episode_reward = state["episode_reward"]
        trainer._episode_steps = state["episode_steps"]
        return trainer


def train(env, config: DqnConfig, total_steps: int, seed: int):
    """One full training run; returns (parameters, episode log)."""
    trainer = DqnTrainer(env, config, total_steps, seed)
    trainer.run()
    return trainer.online, trainer.log


# ---------------------------------------------------------------------------
# Evaluation policies
# ---------------------------------------------------------------------------

class DqnPolicy:
    """Greedy (epsilon = 0) network policy with the optional episode mask."""

    def __init__(self, params: nn.Parameters, unique_actions: bool = True):
        self.params = params
        self.unique_actions = unique_actions
        self.mask: set[int] = set()

    def begin_episode(self, env) -> None:
        self.mask = set()

    def act(self, env, obs: Observation) -> int:
        q = nn.forward(self.params, obs.values[None, :])[0]
        return select_action(q, self.mask, 0.0, None, self.unique_actions)


class RandomAgent:
    """Uniform over the (unmasked) action space."""

    def __init__(self, rng: np.random.Generator, unique_actions: bool = True):
        self.rng = rng
        self.unique_actions = unique_actions
        self.mask: set[int] = set()

    def begin_episode(self, env) -> None:
        self.mask = set()

    def act(self, env, obs: Observation) -> int:
        zeros = np.zeros(env.n_actions)
        return select_action(zeros, self.mask, 1.0, self.rng,
                             self.unique_actions)


def reactance_distances(case: NetworkCase, source_bus: int) -> dict[int, float]:
    """Shortest-path distance from source_bus to every bus over the
    in-service branch graph, edge weight |x| (reactances may be negative
    for equivalent branches, and path lengths must be nonnegative)."""
    adj: dict[int, list[tuple[float, int]]] = {b.id: [] for b in case.buses}
    for br in case.branches:
        if br.in_service:
            w = abs(br.x)
            adj[br.from_bus].append((w, br.to_bus))
            adj[br.to_bus].append((w, br.from_bus))
    dist = {source_bus: 0.0}
    frontier = [(0.0, source_bus)]
    while frontier:
        d, u = heapq.heappop(frontier)
        if d > dist.get(u, np.inf):
            continue
        for w, v in adj[u]:
            nd = d + w
            if nd < dist.get(v, np.inf):
                dist[v] = nd
                heapq.heappush(frontier, (nd, v))
    return dist


class GraphAgent:
    """Model-based heuristic: find the bus with the worst band violation,
    actuate a corrective shunt at or adjacent to it if one is available,
    otherwise nudge the electrically nearest in-service generator's set
    point one discrete step in the corrective direction. Actions are never
    repeated within an episode; with nothing corrective left it no-ops.
    Fully deterministic: ties break toward lowest bus/shunt/generator index.
    """

    def __init__(self):
        self.used: set[int] = set()

    def begin_episode(self, env) -> None:
        self.used = set()

    def act(self, env, obs: Observation) -> int:
        solution = env.solution
        if solution is None or not solution.converged:
            return 0
        working = env.working
        band = env.config.band
        d = band_distance(solution.v, band)
        if not np.any(d > 0):
            return 0
        worst_pos = int(np.argmax(d))
        worst_bus = working.buses[worst_pos].id
        high = solution.v[worst_pos] > band[1]

        action = (self._shunt_action(env, working, worst_bus, high)
                  or self._generator_action(env, working, worst_bus, high))
        if action is None:
            return 0
        self.used.add(action)
        return action

    def _shunt_action(self, env, working, worst_bus: int,
                      high: bool) -> int | None:
        if not working.shunts:
            return None
        neighborhood = {worst_bus}
        for br in working.branches:
            if br.in_service:
                if br.from_bus == worst_bus:
                    neighborhood.add(br.to_bus)
                elif br.to_bus == worst_bus:
                    neighborhood.add(br.from_bus)
        for k, shunt in enumerate(working.shunts):
            if shunt.bus not in neighborhood:
                continue
            # Corrective: open a closed capacitor on high voltage, close
            # an open one on low voltage (signs flip for reactors).
            capacitive = shunt.q_nominal >= 0
            if high:
                corrective = shunt.closed if capacitive else not shunt.closed
            else:
                corrective = (not shunt.closed) if capacitive else shunt.closed
            if not corrective:
                continue
            flat = env.action_space.encode(
                Action("shunt_toggle", -1, shunt_index=k))
            if flat not in self.used:
                return flat
        return None

    def _generator_action(self, env, working, worst_bus: int,
                          high: bool) -> int | None:
        dist = reactance_distances(working, worst_bus)
        ranked = sorted(
            (i for i, g in enumerate(working.generators) if g.in_service),
            key=lambda i: (dist.get(working.generators[i].bus, np.inf), i))
        setpoints = env.setpoints
        for gi in ranked:
            g = working.generators[gi]
            if dist.get(g.bus, np.inf) == np.inf:
                continue
            current = int(np.argmin(np.abs(np.asarray(setpoints) - g.v_setpoint)))
            target = current - 1 if high else current + 1
            if not (0 <= target < len(setpoints)):
                continue
            flat = env.action_space.encode(
                Action("gen_setpoint", -1, gen_index=gi,
                       setpoint_index=target))
            if flat not in self.used:
                return flat
        return None


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EpisodeEval:
    index: int
    init_solved: bool
    initial_oob: bool
    already_in_band: bool
    success: bool
    steps: int
    reward: float
    actions: list[int] = field(default_factory=list)


@dataclass
class EvalResult:
    """Per-episode outcomes plus the aggregate success metrics.

    ps is the percentage of all episodes ending fully in band; psoobv is
    the same restricted to episodes whose initial state solved with at
    least one out-of-band bus (episodes that begin unsolvable have no
    voltages and are excluded from that denominator, but still count as
    failures in ps).
    """
    records: list[EpisodeEval]

    @property
    def ps(self) -> float:
        if not self.records:
            return 0.0
        return 100.0 * sum(r.success for r in self.records) / len(self.records)

    @property
    def psoobv(self) -> float:
        oob = [r for r in self.records if r.initial_oob]
        if not oob:
            return 0.0
        return 100.0 * sum(r.success for r in oob) / len(oob)

    @property
    def mean_reward(self) -> float:
        if not self.records:
            return 0.0
        return float(np.mean([r.reward for r in self.records]))

    @property
    def mean_actions_per_success(self) -> float:
        wins = [r.steps for r in self.records if r.success]
        return float(np.mean(wins)) if wins else float("nan")


def evaluate(policy, env, scenarios: list[Scenario]) -> EvalResult:
    """Greedy rollout of every scenario; deterministic given the policy."""
    records = []
    for i, scenario in enumerate(scenarios):
        obs = env.reset(scenario)
        policy.begin_episode(env)
        init_solved = env.solution.converged
        initial_oob = bool(
            init_solved and np.any(band_distance(env.solution.v, env.band) > 0))
        total_reward = 0.0
        actions: list[int] = []
        done = False
        steps = 0
        info: dict = {}
        while not done:
            action = policy.act(env, obs)
            actions.append(action)
            result = env.step(action)
            obs = result.observation
            total_reward += result.reward
            steps += 1
            done = result.done
            info = result.info
        records.append(EpisodeEval(
            index=i, init_solved=init_solved, initial_oob=initial_oob,
            already_in_band=bool(info.get("already_in_band", False)),
            success=bool(info.get("is_success", False)), steps=steps,
            reward=total_reward, actions=actions))
    return EvalResult(records)
