"""AC power flow: Y-bus construction, Newton-Raphson solve in polar form,
generator reactive-limit enforcement, and connectivity checks.

The solve is a pure function of (case, config, warm start): no shared
mutable state, so concurrent solves on distinct inputs are safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .netmodel import BusType, NetworkCase


class SolveStatus(Enum):
    CONVERGED = "converged"
    DIVERGED = "diverged"
    MAX_ITERATIONS = "max_iterations"
    ISLANDED = "islanded"


@dataclass
class SolverConfig:
    tolerance: float = 1e-8        # max |mismatch| in p.u. power
    max_iterations: int = 25
    enforce_q_limits: bool = True
    flat_start: bool = True
    q_limit_rounds: int = 10       # outer PV/PQ switching rounds

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class PowerFlowSolution:
    """Converged (or failed) operating point.

    v/theta are per-bus in case bus order; gen_q is MVAr per generator
    record (0 for out-of-service units); gen_p_slack is the slack unit's
    MW output after balancing.
    """
    status: SolveStatus
    v: np.ndarray
    theta: np.ndarray
    gen_q: np.ndarray
    gen_p_slack: float
    iterations: int

    @property
    def converged(self) -> bool:
        return self.status is SolveStatus.CONVERGED


def build_admittance(case: NetworkCase) -> sp.csr_matrix:
    """Standard bus admittance matrix (complex, sparse).

    Branch series admittance 1/(r+jx) with off-nominal tap on the from
    side, half the line charging at each end, fixed bus shunts
    (gs+j*bs)/base, and closed switchable shunts j*q_nominal/base.
    Out-of-service branches contribute nothing.
    """
    n = case.n_buses
    idx = case.bus_index
    rows, cols, vals = [], [], []
    for br in case.branches:
        if not br.in_service:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_charging / 2.0
        tap = br.tap_ratio
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [(ys + bc) / (tap * tap), ys + bc, -ys / tap, -ys / tap]
    for b in case.buses:
        if b.gs != 0.0 or b.bs != 0.0:
            rows.append(idx[b.id])
            cols.append(idx[b.id])
            vals.append(complex(b.gs, b.bs) / case.base_mva)
    for shunt in case.shunts:
        if shunt.closed:
            rows.append(idx[shunt.bus])
            cols.append(idx[shunt.bus])
            vals.append(1j * shunt.q_nominal / case.base_mva)
    y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)
    return y.tocsr()


def check_connectivity(case: NetworkCase) -> tuple[bool, list[int]]:
    """Breadth-first reachability from the slack over in-service branches.

    Returns (connected, isolated bus ids); connected means every bus is
    reachable.
    """
    idx = case.bus_index
    adj: list[list[int]] = [[] for _ in range(case.n_buses)]
    for br in case.branches:
        if br.in_service:
            f, t = idx[br.from_bus], idx[br.to_bus]
            adj[f].append(t)
            adj[t].append(f)
    seen = np.zeros(case.n_buses, dtype=bool)
    start = idx[case.slack_bus]
    seen[start] = True
    frontier = [start]
    while frontier:
        nxt = []
        for u in frontier:
            for w in adj[u]:
                if not seen[w]:
                    seen[w] = True
                    nxt.append(w)
        frontier = nxt
    isolated = [case.buses[i].id for i in range(case.n_buses) if not seen[i]]
    return (len(isolated) == 0, isolated)


def _injections(case: NetworkCase) -> np.ndarray:
    """Specified complex power injection per bus, p.u. (generation minus
    load; slack/PV reactive parts are placeholders the solve ignores)."""
    idx = case.bus_index
    s = np.zeros(case.n_buses, dtype=complex)
    for g in case.generators:
        if g.in_service:
            s[idx[g.bus]] += g.p / case.base_mva
    for ld in case.loads:
        s[idx[ld.bus]] -= complex(ld.p, ld.q) / case.base_mva
    return s


def solve(case: NetworkCase, config: SolverConfig | None = None,
          v0: np.ndarray | None = None,
          theta0: np.ndarray | None = None) -> PowerFlowSolution:
    """Newton-Raphson power flow on the polar mismatch equations.

    PV buses hold voltage at the generator set point unless the unit hits
    a reactive limit, in which case the bus is converted to PQ pinned at
    the binding limit for another Newton pass (and converts back if the
    limit un-binds). The slack unit is exempt from limit conversion — it
    is the balancing resource. Numerical blow-up is reported as DIVERGED,
    an unreachable bus set as ISLANDED; no exceptions are raised for
    solvability problems.

    v0/theta0 warm-start the iteration (full-length per-bus arrays);
    otherwise the configured flat start or case initial values are used.
    """
    config = config or SolverConfig()
    n = case.n_buses
    idx = case.bus_index
    failed = np.full(n, np.nan)

    connected, _ = check_connectivity(case)
    if not connected:
        return PowerFlowSolution(SolveStatus.ISLANDED, failed, failed,
                                 np.zeros(len(case.generators)), 0.0, 0)

    ybus = build_admittance(case).toarray()  # dense is fine at <= 500 buses
    s_spec = _injections(case)
    types = list(case.bus_types)
    slack = idx[case.slack_bus]

    setpoint = np.ones(n)
    for g in case.generators:
        if g.in_service:
            setpoint[idx[g.bus]] = g.v_setpoint

    v = np.ones(n)
    theta = np.zeros(n)
    if config.flat_start:
        for i, b in enumerate(case.buses):
            if types[i] in (BusType.PV, BusType.SLACK):
                v[i] = setpoint[i]
    else:
        v = np.array([b.v_init for b in case.buses])
        theta = np.array([b.angle_init for b in case.buses])
        for i in range(n):
            if types[i] in (BusType.PV, BusType.SLACK):
                v[i] = setpoint[i]
    if v0 is not None:
        v = v0.copy()
    if theta0 is not None:
        theta = theta0.copy()
    # The slack magnitude is a fixed boundary condition (the unit's set
    # point), never an iterate; re-pin it after any warm-start override.
    if any(g.in_service and g.bus == case.slack_bus for g in case.generators):
        v[slack] = setpoint[slack]

    # Reactive-limit loop: converge, check generator Q, pin violators at
    # the binding limit (bus becomes PQ), repeat; a pinned bus whose limit
    # un-binds is released back to PV.
    q_spec = s_spec.imag.copy()           # adjusted when a unit is pinned
    pinned: dict[int, float] = {}         # bus position -> pinned Q (p.u.)
    gen_by_bus = {idx[g.bus]: g for g in case.generators if g.in_service}
    load_q = np.zeros(n)
    for ld in case.loads:
        load_q[idx[ld.bus]] -= ld.q / case.base_mva

    iterations_total = 0
    rounds = config.q_limit_rounds if config.enforce_q_limits else 1
    last: PowerFlowSolution | None = None
    for _ in range(max(rounds, 1)):
        is_pv = np.array([
            types[i] is BusType.PV and i not in pinned for i in range(n)])
        is_pq = ~is_pv
        is_pq[slack] = False
        v_target = v.copy()
        v_target[is_pv] = setpoint[is_pv]
        s_run = s_spec.copy()
        s_run.imag = q_spec
        result = _newton(ybus, s_run, v_target, theta, slack,
                         np.flatnonzero(is_pv), np.flatnonzero(is_pq),
                         config)
        iterations_total += result[3]
        if result[0] is not SolveStatus.CONVERGED:
            last = _package(case, result[0], failed, failed, iterations_total)
            return last
        v, theta = result[1], result[2]

        if not config.enforce_q_limits:
            break

        # Reactive output each in-service unit must supply at its bus.
        # Switch one bus per round (worst violator first); releases are
        # considered only once no unit violates. One-at-a-time switching
        # is slower but markedly more robust than pinning all violators
        # simultaneously near the feasibility boundary.
        vc = v * np.exp(1j * theta)
        q_inj = (vc * np.conj(ybus @ vc)).imag
        worst_pin = None       # (excess, bus, pin value)
        release = None
        for i, g in sorted(gen_by_bus.items()):
            if i == slack:
                continue
            q_gen = q_inj[i] - load_q[i]
            q_min = g.q_min / case.base_mva
            q_max = g.q_max / case.base_mva
            if i not in pinned:
                excess = max(q_gen - q_max, q_min - q_gen)
                if excess > 1e-9:
                    pin_at = q_max if q_gen > q_max else q_min
                    if worst_pin is None or excess > worst_pin[0]:
                        worst_pin = (excess, i, pin_at)
            elif release is None:
                # Release when regulating again would pull Q back toward
                # the feasible range: pinned at max but voltage above set
                # point (or at min but below) means the limit un-binds.
                if pinned[i] == q_max and v[i] > setpoint[i] + 1e-9:
                    release = i
                elif pinned[i] == q_min and v[i] < setpoint[i] - 1e-9:
                    release = i
        if worst_pin is not None:
            _, i, pin_at = worst_pin
            pinned[i] = pin_at
            q_spec[i] = pin_at + load_q[i]
        elif release is not None:
            del pinned[release]
        else:
            break
    else:
        # Exhausted switching rounds without a stable limit set.
        return _package(case, SolveStatus.MAX_ITERATIONS, failed, failed,
                        iterations_total)

    return _package(case, SolveStatus.CONVERGED, v, theta, iterations_total)


def _mismatch_vec(ybus, s_spec, v, theta, pvpq, pq):
    vc = v * np.exp(1j * theta)
    mis = vc * np.conj(ybus @ vc) - s_spec
    return np.concatenate([mis[pvpq].real, mis[pq].imag])


def _newton(ybus: np.ndarray, s_spec: np.ndarray, v_start: np.ndarray,
            theta_start: np.ndarray, slack: int, pv: np.ndarray,
            pq: np.ndarray, config: SolverConfig):
    """Inner Newton iteration for a fixed PV/PQ partition, globalized
    with a backtracking line search: when the full step grows the
    mismatch norm, the step is halved (a few times) before accepting.
    This widens the region of attraction from poor starts without
    changing the fixed point."""
    v = v_start.copy()
    theta = theta_start.copy()
    pvpq = np.concatenate([pv, pq])
    pvpq.sort()

    for it in range(config.max_iterations + 1):
        vc = v * np.exp(1j * theta)
        mis = vc * np.conj(ybus @ vc) - s_spec
        f = np.concatenate([mis[pvpq].real, mis[pq].imag])
        if not np.all(np.isfinite(f)):
            return (SolveStatus.DIVERGED, v, theta, it)
        if len(f) == 0 or np.max(np.abs(f)) < config.tolerance:
            return (SolveStatus.CONVERGED, v, theta, it)
        if it == config.max_iterations:
            return (SolveStatus.MAX_ITERATIONS, v, theta, it)

        # Complex-form Jacobian blocks (dS/d_theta, dS/d_vm), assembled
        # with broadcasting rather than diagonal-matrix products.
        ibus = ybus @ vc
        vnorm = np.exp(1j * theta)
        ds_dvm = vc[:, None] * np.conj(ybus * vnorm[None, :])
        ds_dvm[np.arange(len(vc)), np.arange(len(vc))] += np.conj(ibus) * vnorm
        tmp = -(ybus * vc[None, :])
        tmp[np.arange(len(vc)), np.arange(len(vc))] += ibus
        ds_dth = 1j * vc[:, None] * np.conj(tmp)

        j11 = ds_dth[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dth[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            return (SolveStatus.DIVERGED, v, theta, it)
        if not np.all(np.isfinite(dx)):
            return (SolveStatus.DIVERGED, v, theta, it)

        norm0 = np.linalg.norm(f)
        step = 1.0
        for _ in range(12):
            v_try = v.copy()
            theta_try = theta.copy()
            theta_try[pvpq] += step * dx[:len(pvpq)]
            v_try[pq] += step * dx[len(pvpq):]
            if np.all(v_try > 0) and np.max(v_try) <= 10.0:
                f_try = _mismatch_vec(ybus, s_spec, v_try, theta_try, pvpq, pq)
                if np.all(np.isfinite(f_try)) and (
                        np.linalg.norm(f_try) < norm0 * (1.0 - 1e-4 * step)
                        or np.max(np.abs(f_try)) < config.tolerance):
                    break
            step *= 0.5
        else:
            return (SolveStatus.DIVERGED, v, theta, it + 1)
        v, theta = v_try, theta_try

    return (SolveStatus.MAX_ITERATIONS, v, theta, config.max_iterations)


def _package(case: NetworkCase, status: SolveStatus, v: np.ndarray,
             theta: np.ndarray, iterations: int) -> PowerFlowSolution:
    gen_q = np.zeros(len(case.generators))
    gen_p_slack = 0.0
    if status is SolveStatus.CONVERGED:
        idx = case.bus_index
        ybus = build_admittance(case)
        vc = v * np.exp(1j * theta)
        s_inj = vc * np.conj(ybus @ vc)
        load = np.zeros(case.n_buses, dtype=complex)
        for ld in case.loads:
            load[idx[ld.bus]] += complex(ld.p, ld.q) / case.base_mva
        for gi, g in enumerate(case.generators):
            if not g.in_service:
                continue
            i = idx[g.bus]
            gen_q[gi] = (s_inj[i].imag + load[i].imag) * case.base_mva
            if g.bus == case.slack_bus:
                gen_p_slack = (s_inj[i].real + load[i].real) * case.base_mva
    return PowerFlowSolution(status, v, theta, gen_q, gen_p_slack, iterations)


def mismatch(case: NetworkCase, v: np.ndarray,
             theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Recompute per-bus P/Q mismatch (p.u.) from a returned state.

    Independent of the solver bookkeeping: rebuilds the admittance matrix
    and injections from the case. Q entries for slack/PV buses and the P
    entry for the slack are reported as 0 (they are free variables), with
    PV-bus Q computed against the unit's actual output, i.e. also free.
    """
    ybus = build_admittance(case)
    vc = v * np.exp(1j * theta)
    mis = vc * np.conj(ybus @ vc) - _injections(case)
    types = case.bus_types
    p_mis = mis.real.copy()
    q_mis = mis.imag.copy()
    for i, t in enumerate(types):
        if t is BusType.SLACK:
            p_mis[i] = 0.0
            q_mis[i] = 0.0
        elif t is BusType.PV:
            q_mis[i] = 0.0
    return p_mis, q_mis
