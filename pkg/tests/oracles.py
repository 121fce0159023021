"""Independent reference computations for the test suite.

These deliberately avoid the package's own solution paths: the power flow
oracle re-derives the network equations from the case data and hands them
to MINPACK (scipy.optimize.root), gradients come from central finite
differences, and the chain-MDP optimum comes from value iteration.
"""

from __future__ import annotations

import numpy as np
import scipy.optimize

from voltgrid.netmodel import BusType, NetworkCase


def oracle_ybus(case: NetworkCase) -> np.ndarray:
    """Admittance matrix rebuilt from scratch (dense, textbook element
    stamping)."""
    n = case.n_buses
    pos = {b.id: i for i, b in enumerate(case.buses)}
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if not br.in_service:
            continue
        f, t = pos[br.from_bus], pos[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        sh = 1j * br.b_charging / 2.0
        a = br.tap_ratio
        y[f, f] += (ys + sh) / a**2
        y[t, t] += ys + sh
        y[f, t] -= ys / a
        y[t, f] -= ys / a
    for b in case.buses:
        y[pos[b.id], pos[b.id]] += complex(b.gs, b.bs) / case.base_mva
    for s in case.shunts:
        if s.closed:
            y[pos[s.bus], pos[s.bus]] += 1j * s.q_nominal / case.base_mva
    return y


def oracle_power_flow(case: NetworkCase, tol: float = 1e-10):
    """Solve the power flow with MINPACK's hybrid method.

    Unknowns are non-slack angles and PQ-bus voltage magnitudes; PV buses
    are held at their set points, generator reactive limits are not
    enforced. Returns (v, theta) per bus in case order, or None when the
    root finder fails.
    """
    n = case.n_buses
    pos = {b.id: i for i, b in enumerate(case.buses)}
    y = oracle_ybus(case)
    types = case.bus_types

    p_spec = np.zeros(n)
    q_spec = np.zeros(n)
    for g in case.generators:
        if g.in_service:
            p_spec[pos[g.bus]] += g.p / case.base_mva
    for ld in case.loads:
        p_spec[pos[ld.bus]] -= ld.p / case.base_mva
        q_spec[pos[ld.bus]] -= ld.q / case.base_mva

    setpoint = {}
    for g in case.generators:
        if g.in_service:
            setpoint[pos[g.bus]] = g.v_setpoint

    slack = pos[case.slack_bus]
    non_slack = [i for i in range(n) if i != slack]
    pq = [i for i, t in enumerate(types) if t is BusType.PQ]

    v_fixed = np.ones(n)
    for i, t in enumerate(types):
        if t in (BusType.PV, BusType.SLACK):
            v_fixed[i] = setpoint.get(i, 1.0)

    def residual(z):
        theta = np.zeros(n)
        theta[non_slack] = z[: len(non_slack)]
        v = v_fixed.copy()
        v[pq] = z[len(non_slack):]
        vc = v * np.exp(1j * theta)
        s = vc * np.conj(y @ vc)
        return np.concatenate([
            s.real[non_slack] - p_spec[non_slack],
            s.imag[pq] - q_spec[pq],
        ])

    z0 = np.concatenate([np.zeros(len(non_slack)), np.ones(len(pq))])
    sol = scipy.optimize.root(residual, z0, method="hybr",
                              options={"xtol": tol, "maxfev": 8000 * len(z0)})
    if not sol.success or np.max(np.abs(residual(sol.x))) > 1e-8:
        return None
    theta = np.zeros(n)
    theta[non_slack] = sol.x[: len(non_slack)]
    v = v_fixed.copy()
    v[pq] = sol.x[len(non_slack):]
    return v, theta


def finite_difference_grads(loss_fn, arrays: list[np.ndarray],
                            eps: float = 1e-6) -> list[np.ndarray]:
    """Central finite differences of loss_fn() w.r.t. every array entry
    (arrays are perturbed in place and restored)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            orig = arr[ix]
            arr[ix] = orig + eps
            up = loss_fn()
            arr[ix] = orig - eps
            down = loss_fn()
            arr[ix] = orig
            g[ix] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def value_iteration(n_states: int, n_actions: int, transition, reward,
                    terminal, gamma: float, tol: float = 1e-12) -> np.ndarray:
    """Tabular optimal Q for a deterministic MDP given as functions
    transition(s, a) -> s', reward(s, a) -> r, terminal(s) -> bool."""
    q = np.zeros((n_states, n_actions))
    while True:
        q_new = np.zeros_like(q)
        for s in range(n_states):
            if terminal(s):
                continue
            for a in range(n_actions):
                s2 = transition(s, a)
                bootstrap = 0.0 if terminal(s2) else np.max(q[s2])
                q_new[s, a] = reward(s, a) + gamma * bootstrap
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
