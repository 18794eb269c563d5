"""Ground-truth OPF oracle.

The oracle combines a quadratic-cost active dispatch under a linear (PTDF)
network model with a full Newton-Raphson AC power flow that supplies the
nonlinear voltages, branch flows, and losses. The slack generator absorbs the
losses the linear dispatch cannot see, and the operating cost is recomputed
from the final generator outputs.

All quantities per-unit. Slack and PV buses regulate 1.0 pu voltage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import Infeasible, NonConvergence, SingularJacobian
from .grid import NetworkCase

NEWTON_TOL = 1e-8
NEWTON_MAX_ITER = 30

# active-set tolerances (all quantities O(1) per-unit)
_ACTIVE_TOL = 1e-9
_MULT_TOL = 1e-9
_STEP_TOL = 1e-11


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Dense complex bus admittance matrix."""

    n: int
    entries: np.ndarray


@dataclass(frozen=True)
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_branch: np.ndarray
    p_slack: float
    q_slack: float
    iterations: int
    max_mismatch: float


@dataclass(frozen=True)
class DispatchSolution:
    p_gen: np.ndarray
    cost: float
    binding: tuple


@dataclass(frozen=True)
class OpfSolution:
    """Output vector of one OPF solve: cost, voltages, outputs, flows."""

    cost: float
    v_mag: np.ndarray
    p_gen: np.ndarray
    p_branch: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate(([self.cost], self.v_mag, self.p_gen, self.p_branch))


def solution_layout(case: NetworkCase) -> dict:
    """Index slices of the flattened OpfSolution vector for a case."""
    nb, ng, nl = case.n_bus, case.n_gen, case.n_branch
    return {
        "cost": slice(0, 1),
        "v_mag": slice(1, 1 + nb),
        "p_gen": slice(1 + nb, 1 + nb + ng),
        "p_branch": slice(1 + nb + ng, 1 + nb + ng + nl),
    }


# ---------------------------------------------------------------------------
# admittance matrix


def build_ybus(case: NetworkCase) -> AdmittanceMatrix:
    """Assemble the dense bus admittance matrix (pi-model, shunt split 50/50)."""
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_sh
        f, t = br.from_bus, br.to_bus
        Y[f, t] -= ys
        Y[t, f] -= ys
        Y[f, f] += ys + ysh
        Y[t, t] += ys + ysh
    return AdmittanceMatrix(n=n, entries=Y)


# ---------------------------------------------------------------------------
# Newton-Raphson AC power flow


def ac_power_flow(case: NetworkCase, p_inj: np.ndarray, q_inj: np.ndarray,
                  tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER) -> PowerFlowSolution:
    """Full Newton on the polar mismatch equations, flat start.

    ``p_inj``/``q_inj`` are net per-bus injections (generation minus load).
    The P entry at the slack bus and Q entries at slack/PV buses are ignored;
    those quantities are outputs of the solve.
    """
    n = case.n_bus
    ybus = build_ybus(case).entries
    slack = case.slack_index
    pv = case.pv_indices()
    pq = case.pq_indices()
    pvpq = np.concatenate([pv, pq]).astype(int)
    npv, npq = len(pv), len(pq)

    vm = np.ones(n)
    va = np.zeros(n)

    p_inj = np.asarray(p_inj, dtype=float)
    q_inj = np.asarray(q_inj, dtype=float)
    if p_inj.shape != (n,) or q_inj.shape != (n,):
        raise ValueError(f"injection vectors must have shape ({n},)")

    iterations = 0
    for iterations in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        s_calc = v * np.conj(ybus @ v)
        mis_p = s_calc.real[pvpq] - p_inj[pvpq]
        mis_q = s_calc.imag[pq] - q_inj[pq]
        mismatch = np.concatenate([mis_p, mis_q])
        max_mis = float(np.max(np.abs(mismatch))) if mismatch.size else 0.0
        if max_mis <= tol:
            return _finish_power_flow(case, ybus, vm, va, slack, iterations, max_mis)
        if iterations == max_iter or not np.isfinite(max_mis):
            raise NonConvergence(iterations, max_mis)

        ibus = ybus @ v
        diag_v = np.diag(v)
        diag_i = np.diag(ibus)
        diag_vnorm = np.diag(v / np.abs(v))
        ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
        ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)

        j11 = ds_dva[np.ix_(pvpq, pvpq)].real
        j12 = ds_dvm[np.ix_(pvpq, pq)].real
        j21 = ds_dva[np.ix_(pq, pvpq)].imag
        j22 = ds_dvm[np.ix_(pq, pq)].imag
        jac = np.block([[j11, j12], [j21, j22]])

        try:
            dx = np.linalg.solve(jac, -mismatch)
        except np.linalg.LinAlgError as exc:
            raise SingularJacobian(f"Jacobian factorization failed at iteration {iterations}: {exc}") from None
        if not np.all(np.isfinite(dx)):
            raise SingularJacobian(f"Jacobian produced a non-finite step at iteration {iterations}")

        va[pvpq] += dx[: npv + npq]
        vm[pq] += dx[npv + npq:]

    raise NonConvergence(max_iter, float("nan"))


def _finish_power_flow(case, ybus, vm, va, slack, iterations, max_mis):
    v = vm * np.exp(1j * va)
    s_slack = v[slack] * np.conj(ybus[slack] @ v)
    p_branch = branch_flows(case, vm, va)
    return PowerFlowSolution(v_mag=vm.copy(), v_ang=va.copy(), p_branch=p_branch,
                             p_slack=float(s_slack.real), q_slack=float(s_slack.imag),
                             iterations=iterations, max_mismatch=max_mis)


def branch_flows(case: NetworkCase, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
    """Sending-end active power of every branch."""
    v = vm * np.exp(1j * va)
    out = np.empty(case.n_branch)
    for i, br in enumerate(case.branches):
        ys = 1.0 / complex(br.r, br.x)
        vf, vt = v[br.from_bus], v[br.to_bus]
        i_from = ys * (vf - vt) + 0.5j * br.b_sh * vf
        out[i] = (vf * np.conj(i_from)).real
    return out


def series_losses(case: NetworkCase, vm: np.ndarray, va: np.ndarray) -> float:
    """Total I^2 R loss over all branches (shunts are lossless)."""
    v = vm * np.exp(1j * va)
    total = 0.0
    for br in case.branches:
        ys = 1.0 / complex(br.r, br.x)
        i_series = ys * (v[br.from_bus] - v[br.to_bus])
        total += float(np.abs(i_series) ** 2 * br.r)
    return total


def power_flow_mismatch(case: NetworkCase, p_inj, q_inj, vm, va) -> float:
    """Residual of the mismatch equations at a candidate solution."""
    ybus = build_ybus(case).entries
    v = vm * np.exp(1j * va)
    s_calc = v * np.conj(ybus @ v)
    pv = case.pv_indices()
    pq = case.pq_indices()
    pvpq = np.concatenate([pv, pq]).astype(int)
    parts = [s_calc.real[pvpq] - np.asarray(p_inj)[pvpq], s_calc.imag[pq] - np.asarray(q_inj)[pq]]
    res = np.concatenate(parts)
    return float(np.max(np.abs(res))) if res.size else 0.0


# ---------------------------------------------------------------------------
# DC network sensitivities


def ptdf_matrix(case: NetworkCase) -> np.ndarray:
    """Power transfer distribution factors (slack column zero)."""
    n, m = case.n_bus, case.n_branch
    if m == 0:
        return np.zeros((0, n))
    slack = case.slack_index
    susc = np.array([1.0 / br.x for br in case.branches])
    a = np.zeros((m, n))
    for i, br in enumerate(case.branches):
        a[i, br.from_bus] = 1.0
        a[i, br.to_bus] = -1.0
    bf = susc[:, None] * a
    bbus = a.T @ bf
    keep = [i for i in range(n) if i != slack]
    x_red = np.linalg.inv(bbus[np.ix_(keep, keep)])
    ptdf = np.zeros((m, n))
    ptdf[:, keep] = bf[:, keep] @ x_red
    return ptdf


# ---------------------------------------------------------------------------
# quadratic dispatch (active-set QP)


def dc_opf(case: NetworkCase, loads: np.ndarray) -> DispatchSolution:
    """Minimum-cost dispatch under balance, generator, and PTDF flow limits.

    Solved by primal active-set iteration on the equality-reduced KKT system;
    exact for convex quadratic costs, deterministic (constraint ties broken by
    lowest index). Raises Infeasible when the limits cannot be met.
    """
    loads = np.asarray(loads, dtype=float)
    if loads.shape != (case.n_bus,):
        raise ValueError(f"loads must have shape ({case.n_bus},)")
    if case.n_gen == 0:
        raise Infeasible("case has no generators")

    ng = case.n_gen
    p_min = np.array([g.p_min for g in case.generators])
    p_max = np.array([g.p_max for g in case.generators])
    cost_a = np.array([g.cost_a for g in case.generators])
    cost_b = np.array([g.cost_b for g in case.generators])
    total = float(loads.sum())

    if total > p_max.sum() + 1e-12:
        raise Infeasible(f"total load {total:.6f} pu exceeds total capacity {p_max.sum():.6f} pu",
                         violated=("capacity",))
    if total < p_min.sum() - 1e-12:
        raise Infeasible(f"total load {total:.6f} pu below total minimum output {p_min.sum():.6f} pu",
                         violated=("minimum_output",))

    H = np.diag(2.0 * cost_a)
    g_lin = cost_b.copy()
    a_eq = np.ones((1, ng))

    # inequality rows: -p <= -p_min, p <= p_max, then flow limits both signs
    G = [-np.eye(ng), np.eye(ng)]
    h = [-p_min, p_max]
    names = [f"p_min[{i}]" for i in range(ng)] + [f"p_max[{i}]" for i in range(ng)]

    if case.n_branch:
        ptdf = ptdf_matrix(case)
        gen_map = np.zeros((case.n_bus, ng))
        for i, gen in enumerate(case.generators):
            gen_map[gen.bus, i] = 1.0
        sens = ptdf @ gen_map
        base_flow = -(ptdf @ loads)
        limits = np.array([br.p_limit for br in case.branches])
        G += [sens, -sens]
        h += [limits - base_flow, limits + base_flow]
        names += [f"flow_upper[{i}]" for i in range(case.n_branch)]
        names += [f"flow_lower[{i}]" for i in range(case.n_branch)]

    G = np.vstack(G)
    h = np.concatenate(h)

    p0 = _feasible_start(p_min, p_max, total, G, h, names)
    p_opt = _active_set_qp(H, g_lin, a_eq, np.array([total]), G, h, p0)

    cost = float(np.sum(cost_a * p_opt ** 2 + cost_b * p_opt) + sum(g.cost_c for g in case.generators))
    binding = tuple(names[i] for i in np.flatnonzero(G @ p_opt - h >= -_ACTIVE_TOL))
    return DispatchSolution(p_gen=p_opt, cost=cost, binding=binding)


def _feasible_start(p_min, p_max, total, G, h, names):
    span = p_max - p_min
    frac = (total - p_min.sum()) / span.sum() if span.sum() > 0 else 0.0
    p0 = p_min + np.clip(frac, 0.0, 1.0) * span
    if np.all(G @ p0 - h <= _ACTIVE_TOL):
        return p0

    # proportional fill violates a flow limit: phase-1 LP for a feasible point
    ng = len(p_min)
    n_rows = G.shape[0] - 2 * ng
    g_flow = G[2 * ng:]
    h_flow = h[2 * ng:]
    c = np.concatenate([np.zeros(ng), np.ones(n_rows)])
    a_ub = np.hstack([g_flow, -np.eye(n_rows)])
    a_eq = np.concatenate([np.ones(ng), np.zeros(n_rows)])[None, :]
    bounds = [(lo, hi) for lo, hi in zip(p_min, p_max)] + [(0, None)] * n_rows
    res = linprog(c, A_ub=a_ub, b_ub=h_flow, A_eq=a_eq, b_eq=[total],
                  bounds=bounds, method="highs")
    if res.status != 0 or res.fun > 1e-8:
        bad = ()
        if res.status == 0:
            bad = tuple(names[2 * ng + i] for i in np.flatnonzero(res.x[ng:] > 1e-8))
        raise Infeasible("flow limits cannot be met together with balance and generator limits",
                         violated=bad)
    p0 = res.x[:ng]
    # repair the LP's balance rounding so the equality holds to machine precision
    resid = total - p0.sum()
    free = (p0 > p_min + 1e-7) & (p0 < p_max - 1e-7)
    if not np.any(free):
        free = np.ones(ng, dtype=bool)
    p0[free] += resid / free.sum()
    return p0


def _active_set_qp(H, g, a_eq, b_eq, G, h, x):
    """Primal active-set for convex QP; handles semidefinite H (linear costs)."""
    n = len(x)
    working = [int(i) for i in np.flatnonzero(G @ x - h >= -_ACTIVE_TOL)]
    max_rounds = 100 + 20 * len(h)

    for _ in range(max_rounds):
        C = np.vstack([a_eq, G[working]]) if working else a_eq
        grad = H @ x + g
        d, unbounded = _eqp_direction(H, grad, C)

        if np.linalg.norm(d) <= _STEP_TOL:
            mults, *_ = np.linalg.lstsq(C.T, -grad, rcond=None)
            lam = mults[a_eq.shape[0]:]
            if lam.size == 0 or lam.min() >= -_MULT_TOL:
                return x
            # ties resolved toward the lowest constraint index
            worst = lam.min()
            candidates = [k for k, v in enumerate(lam) if v <= worst + 1e-12]
            drop_pos = min(candidates, key=lambda k: working[k])
            working.pop(drop_pos)
            continue

        slack = h - G @ x
        step_len = np.inf if unbounded else 1.0
        blocker = -1
        g_dot_d = G @ d
        for i in range(len(h)):
            if i in working or g_dot_d[i] <= 1e-12:
                continue
            alpha_i = slack[i] / g_dot_d[i]
            if alpha_i < step_len - 1e-12:
                step_len = max(alpha_i, 0.0)
                blocker = i
        if not np.isfinite(step_len):
            raise Infeasible("dispatch objective unbounded over the feasible set")
        x = x + step_len * d
        if blocker >= 0 and (unbounded or step_len < 1.0 - 1e-12):
            working.append(blocker)
            working.sort()

    raise RuntimeError("active-set iteration did not terminate")


def _eqp_direction(H, grad, C):
    """Minimizing direction of the equality-constrained subproblem.

    Returns (direction, unbounded). ``unbounded`` marks a ray along which the
    reduced objective decreases linearly (degenerate/linear cost case); the
    caller must run it into a blocking constraint.
    """
    u, s, vt = np.linalg.svd(C)
    rank = int(np.sum(s > 1e-11 * max(1.0, s[0] if s.size else 1.0)))
    Z = vt[rank:].T
    if Z.shape[1] == 0:
        return np.zeros(len(grad)), False
    Hz = Z.T @ H @ Z
    gz = Z.T @ grad
    w, V = np.linalg.eigh(Hz)
    scale = max(1.0, float(w[-1])) if w.size else 1.0
    null = w <= 1e-12 * scale
    proj = V.T @ gz
    if np.any(null & (np.abs(proj) > 1e-11)):
        k = int(np.argmax(np.abs(proj) * null))
        ray = -np.sign(proj[k]) * (Z @ V[:, k])
        return ray, True
    dz = np.zeros_like(gz)
    pos = ~null
    dz = -(V[:, pos] @ (proj[pos] / w[pos]))
    return Z @ dz, False


def dispatch_kkt_residual(case: NetworkCase, loads: np.ndarray, sol: DispatchSolution) -> float:
    """Max violation over the KKT conditions of the dispatch QP."""
    ng = case.n_gen
    p = sol.p_gen
    p_min = np.array([g.p_min for g in case.generators])
    p_max = np.array([g.p_max for g in case.generators])
    cost_a = np.array([g.cost_a for g in case.generators])
    cost_b = np.array([g.cost_b for g in case.generators])
    loads = np.asarray(loads, dtype=float)

    G = [-np.eye(ng), np.eye(ng)]
    h = [-p_min, p_max]
    if case.n_branch:
        ptdf = ptdf_matrix(case)
        gen_map = np.zeros((case.n_bus, ng))
        for i, gen in enumerate(case.generators):
            gen_map[gen.bus, i] = 1.0
        sens = ptdf @ gen_map
        base_flow = -(ptdf @ loads)
        limits = np.array([br.p_limit for br in case.branches])
        G += [sens, -sens]
        h += [limits - base_flow, limits + base_flow]
    G = np.vstack(G)
    h = np.concatenate(h)

    grad = 2.0 * cost_a * p + cost_b
    primal_eq = abs(p.sum() - loads.sum())
    primal_ineq = float(np.max(np.clip(G @ p - h, 0.0, None), initial=0.0))

    active = np.flatnonzero(G @ p - h >= -1e-7)
    C = np.vstack([np.ones((1, ng)), G[active]])
    mults, *_ = np.linalg.lstsq(C.T, -grad, rcond=None)
    stationarity = float(np.max(np.abs(C.T @ mults + grad)))
    lam = mults[1:]
    dual = float(max(0.0, -lam.min()) if lam.size else 0.0)
    return max(primal_eq, primal_ineq, stationarity, dual)


# ---------------------------------------------------------------------------
# composed oracle


def apply_sample(case: NetworkCase, sample: np.ndarray):
    """Effective per-bus loads (P, Q per-unit) for one source realization.

    Gaussian-load samples replace the bus load (Q follows from the constant
    power factor); wind and PV samples inject against the local load.
    """
    sample = np.asarray(sample, dtype=float)
    if sample.shape != (case.n_sources,):
        raise ValueError(f"sample must have shape ({case.n_sources},)")
    p_load = case.p_load_vector()
    q_load = case.q_load_vector()
    for value, src in zip(sample, case.sources):
        if src.kind == "gaussian_load":
            pf = src.params["power_factor"]
            p_load[src.bus] = value
            q_load[src.bus] = value * math.tan(math.acos(pf))
        else:
            p_load[src.bus] -= value
    return p_load, q_load


def oracle_opf(case: NetworkCase, sample: np.ndarray,
               tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER) -> OpfSolution:
    """Reference OPF solution for one realized operating condition.

    Dispatch by dc_opf, then an AC power flow with the dispatched outputs at
    PV buses and the slack absorbing losses. Cost is recomputed from the
    final outputs, slack included.
    """
    p_load, q_load = apply_sample(case, sample)
    dispatch = dc_opf(case, p_load)

    slack = case.slack_index
    slack_gens = [i for i, g in enumerate(case.generators) if g.bus == slack]
    if not slack_gens:
        raise Infeasible("no generator at the slack bus to absorb losses")

    p_inj = -p_load
    q_inj = -q_load
    for i, gen in enumerate(case.generators):
        if gen.bus != slack:
            p_inj[gen.bus] += dispatch.p_gen[i]

    flow = ac_power_flow(case, p_inj, q_inj, tol=tol, max_iter=max_iter)

    p_gen = dispatch.p_gen.copy()
    needed = flow.p_slack + p_load[slack]
    delta = needed - sum(p_gen[i] for i in slack_gens)
    for i in slack_gens:
        p_gen[i] += delta / len(slack_gens)

    cost = float(sum(g.cost(p_gen[i]) for i, g in enumerate(case.generators)))
    return OpfSolution(cost=cost, v_mag=flow.v_mag, p_gen=p_gen, p_branch=flow.p_branch)
