#!/usr/bin/env python3
"""Generate the bundled synthetic 200- and 500-bus cases and the native
conversion of the IEEE 14-bus case.

The synthetic systems are deterministic (fixed seeds): a meshed
high-voltage network built over random plane geometry (minimum-spanning
construction plus extra mesh edges, impedances proportional to length)
with generator/load pockets attached through step-up transformers.
Entity counts are fixed targets: 200 buses / 49 generators / 4 shunts /
180 HV lines, and 500 / 90 / 17 / 468. Transformers come on top of the
line counts; they are what make the graph connect.

Run from the repo root:  python3 tools/make_synthetic_cases.py
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from voltgrid.netmodel import (Bus, Branch, Generator, Load, NetworkCase,
                               Shunt, ValidationError, load_case, validate,
                               write_native)
from voltgrid.powerflow import SolverConfig, solve

CASE_DIR = Path(__file__).resolve().parents[1] / "src" / "voltgrid" / "cases"


def build_synthetic(name: str, seed: int, n_buses: int, n_gens: int,
                    n_shunts: int, n_lines: int) -> NetworkCase:
    rng = np.random.default_rng(seed)

    n_lv = n_gens if n_buses - n_gens >= n_lines // 4 else n_buses - n_lines
    n_hv = n_buses - n_lv
    if n_lines < n_hv - 1:
        raise ValueError("line budget cannot connect the HV network")

    # HV geometry on a plane scaled so typical edges are a few tens of km.
    side_km = 14.0 * np.sqrt(n_hv)
    pts = rng.uniform(0, side_km, size=(n_hv, 2))

    # Greedy spanning construction: connect each bus to the nearest
    # already-connected one, then add the shortest unused pairs as mesh.
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    in_tree = [0]
    edges: list[tuple[int, int]] = []
    remaining = set(range(1, n_hv))
    while remaining:
        best = None
        for j in remaining:
            k = in_tree[int(np.argmin(dist[j, in_tree]))]
            d = dist[j, k]
            if best is None or d < best[0]:
                best = (d, j, k)
        _, j, k = best
        edges.append((min(j, k), max(j, k)))
        in_tree.append(j)
        remaining.discard(j)

    used = set(edges)
    extra = n_lines - len(edges)
    candidates = sorted(
        ((dist[i, j], i, j) for i in range(n_hv) for j in range(i + 1, n_hv)
         if (i, j) not in used),
        key=lambda t: t[0])
    for d, i, j in candidates[: 3 * extra]:
        if extra == 0:
            break
        # Skip a few short candidates at random so the mesh is not purely
        # radial-adjacent.
        if rng.random() < 0.25:
            continue
        edges.append((i, j))
        used.add((i, j))
        extra -= 1
    for d, i, j in candidates:
        if extra == 0:
            break
        if (i, j) not in used:
            edges.append((i, j))
            used.add((i, j))
            extra -= 1

    assert len(edges) == n_lines

    # HV buses are ids 1..n_hv; LV buses continue from there.
    buses = [Bus(id=i + 1, base_kv=115.0) for i in range(n_hv)]
    branches = []
    for i, j in edges:
        length = max(dist[i, j], 2.0)
        x = 0.0038 * length * rng.uniform(0.85, 1.15)
        branches.append(Branch(from_bus=i + 1, to_bus=j + 1, r=x / 3.0, x=x,
                               b_charging=4.5e-4 * length))

    # LV pockets: generator buses behind step-up transformers, attached to
    # HV buses spread over the plane.
    attach = rng.choice(n_hv, size=n_lv, replace=False)
    for k in range(n_lv):
        lv_id = n_hv + k + 1
        buses.append(Bus(id=lv_id, base_kv=13.8))
        branches.append(Branch(from_bus=int(attach[k]) + 1, to_bus=lv_id,
                               r=0.005, x=rng.uniform(0.05, 0.10),
                               b_charging=0.0, tap_ratio=1.0))

    # Loads on most HV buses; total sized to the system.
    total_load = 6.0 * n_buses
    load_buses = rng.choice(n_hv, size=int(0.65 * n_hv), replace=False)
    weights = rng.uniform(0.5, 1.5, len(load_buses))
    weights /= weights.sum()
    loads = []
    for b, w in zip(load_buses, weights):
        p = total_load * w
        loads.append(Load(bus=int(b) + 1, p=round(p, 3), q=round(0.29 * p, 3)))

    # Generators: one per LV bus, plus extras on HV buses if the LV pocket
    # count falls short of the target.
    gen_buses = [n_hv + k + 1 for k in range(n_lv)]
    if len(gen_buses) < n_gens:
        hv_extra = [int(b) + 1 for b in
                    rng.choice(n_hv, size=n_gens - len(gen_buses), replace=False)]
        gen_buses += hv_extra
    gen_buses = gen_buses[:n_gens]

    cap_weights = rng.uniform(0.4, 2.2, n_gens)
    cap_weights /= cap_weights.sum()
    capacity = 2.3 * total_load
    dispatch_total = 1.02 * total_load
    gens = []
    for b, w in zip(gen_buses, cap_weights):
        p_max = max(capacity * w, 15.0)
        p = min(dispatch_total * w, 0.9 * p_max)
        q_max = max(0.55 * p_max, 30.0)
        q_min = -max(0.35 * p_max, 20.0)
        gens.append(Generator(bus=b, p=round(p, 3), p_min=0.0,
                              p_max=round(p_max, 3), q_min=round(q_min, 3),
                              q_max=round(q_max, 3),
                              v_setpoint=round(rng.uniform(1.0, 1.03), 4)))
    slack_bus = gens[int(np.argmax([g.p_max for g in gens]))].bus

    shunt_buses = rng.choice(load_buses, size=n_shunts, replace=False)
    shunts = [Shunt(bus=int(b) + 1, q_nominal=round(rng.uniform(10, 40), 1),
                    closed=bool(rng.random() < 0.6))
              for b in shunt_buses]

    return NetworkCase(name=name, base_mva=100.0, slack_bus=slack_bus,
                       buses=tuple(buses), branches=tuple(branches),
                       generators=tuple(gens), loads=tuple(loads),
                       shunts=tuple(shunts))


def check(case: NetworkCase) -> None:
    problems = validate(case)
    if problems:
        raise ValidationError(problems)
    sol = solve(case, SolverConfig())
    n_lines = sum(1 for b in case.branches if b.tap_ratio == 1.0 and
                  b.b_charging > 0)
    print(f"{case.name}: {case.n_buses} buses, {len(case.generators)} gens, "
          f"{len(case.shunts)} shunts, {n_lines} lines "
          f"(+{len(case.branches) - n_lines} transformers)")
    print(f"  solve: {sol.status.value} in {sol.iterations} iterations, "
          f"v in [{sol.v.min():.4f}, {sol.v.max():.4f}]")
    if not sol.converged:
        raise RuntimeError(f"{case.name} does not converge")


def main() -> None:
    ieee14 = load_case(CASE_DIR / "ieee14.m", format="matpower")
    write_native(ieee14, CASE_DIR / "ieee14.json")
    print(f"ieee14: wrote native conversion ({len(ieee14.buses)} buses)")

    syn200 = build_synthetic("syn200", seed=2024200, n_buses=200, n_gens=49,
                             n_shunts=4, n_lines=180)
    check(syn200)
    write_native(syn200, CASE_DIR / "syn200.json")

    syn500 = build_synthetic("syn500", seed=2024500, n_buses=500, n_gens=90,
                             n_shunts=17, n_lines=468)
    check(syn500)
    write_native(syn500, CASE_DIR / "syn500.json")


if __name__ == "__main__":
    main()
