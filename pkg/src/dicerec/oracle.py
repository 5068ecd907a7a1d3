"""Exact tabular ground truth for the distribution-correction objective.

Small MDPs make every expectation a weighted sum, so the inner critic
problem can be solved to machine precision and compared against the
closed-form occupancy ratio. Two independent minimizers are provided: a
damped Newton solver and a random-restart coordinate descent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize_scalar

SUITE_SEEDS = (11, 23, 37, 41, 53)
SUITE_SHAPES = ((3, 2), (4, 3), (5, 2), (2, 3), (5, 3))


class OracleError(RuntimeError):
    pass


class SuiteFormatError(ValueError):
    """Raised when a serialized MDP suite cannot be parsed."""


def _check_distribution(name: str, x: np.ndarray, axis: int = -1) -> None:
    if np.any(x < 0):
        raise ValueError(f"{name} has negative entries")
    if np.max(np.abs(x.sum(axis=axis) - 1.0)) > 1e-12:
        raise ValueError(f"{name} rows must sum to 1")


@dataclass
class TabularMDP:
    """Finite MDP with a behavior policy ``pi_data`` and a candidate policy ``pi``.

    Attributes:
        P: Transition tensor of shape (S, A, S).
        mu0: Initial state distribution, shape (S,).
        gamma: Discount in [0, 1).
        pi_data: Behavior policy, shape (S, A).
        pi: Candidate policy, shape (S, A).
    """

    P: np.ndarray
    mu0: np.ndarray
    gamma: float
    pi_data: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.mu0 = np.asarray(self.mu0, dtype=np.float64)
        self.pi_data = np.asarray(self.pi_data, dtype=np.float64)
        self.pi = np.asarray(self.pi, dtype=np.float64)
        S, A = self.pi.shape
        if self.P.shape != (S, A, S) or self.mu0.shape != (S,) or self.pi_data.shape != (S, A):
            raise ValueError("inconsistent MDP dimensions")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        _check_distribution("P", self.P)
        _check_distribution("mu0", self.mu0)
        _check_distribution("pi_data", self.pi_data)
        _check_distribution("pi", self.pi)

    @property
    def num_states(self) -> int:
        return self.pi.shape[0]

    @property
    def num_actions(self) -> int:
        return self.pi.shape[1]


def random_mdp(seed: int, num_states: int = 3, num_actions: int = 2, gamma: float = 0.9) -> TabularMDP:
    """Dirichlet(1) transition rows, initial distribution and both policies."""
    rng = np.random.default_rng(seed)
    S, A = num_states, num_actions

    def simplex(*shape):
        x = rng.dirichlet(np.ones(shape[-1]), size=shape[:-1])
        return x / x.sum(axis=-1, keepdims=True)

    return TabularMDP(simplex(S, A, S), simplex(S), gamma, simplex(S, A), simplex(S, A))


def default_suite(seed: int = 0, gamma: float = 0.9) -> list[TabularMDP]:
    return [random_mdp(seed + s, S, A, gamma) for s, (S, A) in zip(SUITE_SEEDS, SUITE_SHAPES)]


# ---------------------------------------------------------------------------
# occupancies


@dataclass
class Occupancy:
    """Discounted stationary state-action distribution ``d[s, a]``."""

    d: np.ndarray

    @property
    def states(self) -> np.ndarray:
        return self.d.sum(axis=1)

    def flat(self) -> np.ndarray:
        return self.d.reshape(-1)


def state_transition(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """``P_pi[s, s'] = sum_a pi(a|s) P(s, a, s')``."""
    return np.einsum("sa,sat->st", pi, mdp.P)


def stationary_distribution(mdp: TabularMDP, pi: np.ndarray | None = None) -> Occupancy:
    """Solve ``rho = (1 - gamma) mu0 + gamma P_pi^T rho`` and spread ``rho`` over actions by ``pi``."""
    pi = mdp.pi if pi is None else np.asarray(pi, dtype=np.float64)
    S = mdp.num_states
    system = np.eye(S) - mdp.gamma * state_transition(mdp, pi).T
    try:
        rho = np.linalg.solve(system, (1.0 - mdp.gamma) * mdp.mu0)
    except np.linalg.LinAlgError as exc:
        raise OracleError("occupancy flow system is singular") from exc
    d = rho[:, None] * pi
    return Occupancy(d / d.sum())


def flow_residual(mdp: TabularMDP, pi: np.ndarray, occ: Occupancy) -> float:
    """Max-norm violation of the Bellman flow equation by ``occ``."""
    inflow = np.einsum("sa,sat->t", occ.d, mdp.P)
    rhs = ((1.0 - mdp.gamma) * mdp.mu0 + mdp.gamma * inflow)[:, None] * pi
    return float(np.max(np.abs(occ.d - rhs)))


def exact_kl(d1: Occupancy | np.ndarray, d2: Occupancy | np.ndarray) -> float:
    """``sum d1 log(d1 / d2)`` in nats with ``0 log 0 = 0``."""
    p = d1.d if isinstance(d1, Occupancy) else np.asarray(d1, dtype=np.float64)
    q = d2.d if isinstance(d2, Occupancy) else np.asarray(d2, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    bad = np.argwhere((p > 0) & (q <= 0))
    if bad.size:
        raise OracleError(f"support violation at index {tuple(int(i) for i in bad[0])}")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


# ---------------------------------------------------------------------------
# inner critic problem


def _bellman_matrix(mdp: TabularMDP, pi: np.ndarray) -> np.ndarray:
    """Matrix ``M`` with ``(M v)(s, a) = v(s, a) - gamma sum_{s'} P(s, a, s') sum_{a'} pi(a'|s') v(s', a')``."""
    S, A = mdp.num_states, mdp.num_actions
    backup = np.einsum("sat,tb->satb", mdp.P, pi).reshape(S * A, S * A)
    return np.eye(S * A) - mdp.gamma * backup


@dataclass
class InnerProblem:
    """``J(v) = log sum d_D exp(M v) - (1 - gamma) <mu0 pi, v>`` over tabular ``v``."""

    M: np.ndarray
    d_data: np.ndarray
    start: np.ndarray

    @classmethod
    def build(cls, mdp: TabularMDP, pi: np.ndarray | None = None, d_data: np.ndarray | None = None) -> InnerProblem:
        pi = mdp.pi if pi is None else np.asarray(pi, dtype=np.float64)
        if d_data is None:
            d_data = stationary_distribution(mdp, mdp.pi_data).flat()
        start = ((1.0 - mdp.gamma) * mdp.mu0[:, None] * pi).reshape(-1)
        return cls(_bellman_matrix(mdp, pi), np.asarray(d_data, dtype=np.float64).reshape(-1), start)

    def residual(self, v: np.ndarray) -> np.ndarray:
        return self.M @ v

    def weights(self, v: np.ndarray) -> np.ndarray:
        """Data distribution reweighted by ``exp(r)`` and renormalized."""
        r = self.residual(v)
        logw = np.log(self.d_data) + r
        logw -= logw.max()
        w = np.exp(logw)
        return w / w.sum()

    def value(self, v: np.ndarray) -> float:
        r = self.residual(v)
        top = r.max()
        return float(top + math.log(np.sum(self.d_data * np.exp(r - top))) - self.start @ v)

    def gradient(self, v: np.ndarray) -> np.ndarray:
        return self.M.T @ self.weights(v) - self.start

    def hessian(self, v: np.ndarray) -> np.ndarray:
        w = self.weights(v)
        return self.M.T @ (np.diag(w) - np.outer(w, w)) @ self.M


@dataclass
class InnerSolution:
    v: np.ndarray
    objective: float
    reward: np.ndarray
    grad_norm: float
    iterations: int
    d_data: np.ndarray

    def reweighted(self) -> np.ndarray:
        """``softmax(r*)`` over the data distribution."""
        logw = np.log(self.d_data) + self.reward
        w = np.exp(logw - logw.max())
        return w / w.sum()


def tabular_inner_optimize(mdp: TabularMDP, pi: np.ndarray | None = None, d_data: np.ndarray | None = None,
                           tol: float = 1e-8, max_iter: int = 200) -> InnerSolution:
    """Minimize the tabular critic objective with exact expectations.

    Damped Newton steps with a pseudo-inverse Hessian: the objective is flat
    along constant shifts of ``v`` so the Hessian is singular in exactly that
    direction. Steps are halved until the objective does not increase.

    Args:
        mdp: The MDP; ``mdp.pi`` is used when ``pi`` is omitted.
        pi: Candidate policy of shape (S, A).
        d_data: Data occupancy over (s, a); defaults to the exact occupancy
            of ``mdp.pi_data``.
        tol: Target Euclidean gradient norm.
        max_iter: Iteration cap.

    Returns:
        The minimizer, its objective value and the implied reward
        ``r* = v* - B^pi v*``.

    Raises:
        OracleError: The gradient norm is still above ``tol`` at ``max_iter``.
    """
    if mdp.num_states * mdp.num_actions > 100:
        raise ValueError("tabular oracle is limited to |S||A| <= 100")
    prob = InnerProblem.build(mdp, pi, d_data)
    if np.any(prob.d_data <= 0):
        raise OracleError("data occupancy must have full support")
    v = np.zeros(prob.M.shape[0])
    f = prob.value(v)
    g = prob.gradient(v)
    it = 0
    while np.linalg.norm(g) > tol:
        if it >= max_iter:
            raise OracleError(f"inner optimization did not converge: gradient norm {np.linalg.norm(g):.3e}")
        step = -np.linalg.pinv(prob.hessian(v), rcond=1e-12) @ g
        t = 1.0
        while True:
            cand = v + t * step
            fc = prob.value(cand)
            if fc <= f + 1e-14 or t < 1e-10:
                break
            t *= 0.5
        v, f = cand, fc
        g = prob.gradient(v)
        it += 1
    # a few undamped polishing steps: Newton converges quadratically here, and
    # small data masses amplify gradient error in the recovered reward
    for _ in range(3):
        cand = v - np.linalg.pinv(prob.hessian(v), rcond=1e-12) @ g
        gc = prob.gradient(cand)
        if not np.linalg.norm(gc) < np.linalg.norm(g):
            break
        v, g, f = cand, gc, prob.value(cand)
        it += 1
    return InnerSolution(v, f, prob.residual(v), float(np.linalg.norm(g)), it, prob.d_data)


def coordinate_descent_minimum(mdp: TabularMDP, pi: np.ndarray | None = None, d_data: np.ndarray | None = None,
                               restarts: int = 3, seed: int = 0, max_sweeps: int = 20000,
                               tol: float = 1e-13) -> float:
    """Independent brute-force minimum of the tabular critic objective.

    Cyclic exact line minimization along each coordinate of ``v`` using a
    bounded scalar search, restarted from random points. The objective is
    re-derived here from explicit expectations instead of the matrix form
    used by :func:`tabular_inner_optimize`.
    """
    pi = mdp.pi if pi is None else np.asarray(pi, dtype=np.float64)
    S, A = mdp.num_states, mdp.num_actions
    if d_data is None:
        d_data = stationary_distribution(mdp, mdp.pi_data).d
    d_data = np.asarray(d_data, dtype=np.float64).reshape(S, A)
    g = mdp.gamma

    def objective(v: np.ndarray) -> float:
        follow = np.einsum("tb,tb->t", pi, v)  # E_{a'~pi} v(s', a')
        r = v - g * np.einsum("sat,t->sa", mdp.P, follow)
        top = r.max()
        log_term = top + math.log(np.sum(d_data * np.exp(r - top)))
        return float(log_term - (1.0 - g) * np.sum(mdp.mu0[:, None] * pi * v))

    rng = np.random.default_rng(seed)
    best = math.inf
    for _ in range(restarts):
        v = rng.normal(0.0, 1.0, size=(S, A))
        f = objective(v)
        for _ in range(max_sweeps):
            f_prev = f
            for s in range(S):
                for a in range(A):
                    base = v[s, a]

                    def along(x, s=s, a=a):
                        v[s, a] = x
                        return objective(v)

                    res = minimize_scalar(along, bracket=(base - 1.0, base), options={"xtol": 1e-12})
                    v[s, a] = res.x if res.fun <= f else base
                    f = min(f, res.fun)
            if f_prev - f < tol:
                break
        best = min(best, f)
    return best


# ---------------------------------------------------------------------------
# suite serialization


def _fmt_row(values) -> str:
    return " ".join(repr(float(x)) for x in values)


def dump_suite(suite: list[TabularMDP]) -> str:
    """Human-readable text: a header per MDP, then row-major tensors."""
    lines = [f"suite {len(suite)}"]
    for i, mdp in enumerate(suite):
        S, A = mdp.num_states, mdp.num_actions
        lines.append(f"mdp {i} states {S} actions {A} gamma {mdp.gamma!r}")
        lines.append("mu0 " + _fmt_row(mdp.mu0))
        for s in range(S):
            for a in range(A):
                lines.append(f"P {s} {a} " + _fmt_row(mdp.P[s, a]))
        for s in range(S):
            lines.append(f"pi_data {s} " + _fmt_row(mdp.pi_data[s]))
        for s in range(S):
            lines.append(f"pi {s} " + _fmt_row(mdp.pi[s]))
    return "\n".join(lines) + "\n"


def load_suite(text: str) -> list[TabularMDP]:
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        if not rows or rows[0][0] != "suite":
            raise SuiteFormatError("missing 'suite' header")
        count = int(rows[0][1])
        pos, suite = 1, []
        for _ in range(count):
            head = rows[pos]
            if head[0] != "mdp" or head[2] != "states" or head[4] != "actions" or head[6] != "gamma":
                raise SuiteFormatError(f"bad mdp header: {' '.join(head)}")
            S, A, gamma = int(head[3]), int(head[5]), float(head[7])
            pos += 1

            def take(tag: str, nidx: int, width: int):
                nonlocal pos
                row = rows[pos]
                if row[0] != tag or len(row) != 1 + nidx + width:
                    raise SuiteFormatError(f"expected {tag} row, got: {' '.join(row)}")
                pos += 1
                return [float(x) for x in row[1 + nidx:]]

            mu0 = take("mu0", 0, S)
            P = [[take("P", 2, S) for _ in range(A)] for _ in range(S)]
            pi_data = [take("pi_data", 1, A) for _ in range(S)]
            pi = [take("pi", 1, A) for _ in range(S)]
            suite.append(TabularMDP(np.array(P), np.array(mu0), gamma, np.array(pi_data), np.array(pi)))
        if pos != len(rows):
            raise SuiteFormatError("trailing content after last mdp")
        return suite
    except SuiteFormatError:
        raise
    except (IndexError, ValueError) as exc:
        raise SuiteFormatError(f"malformed suite: {exc}") from exc


# ---------------------------------------------------------------------------
# end-to-end report


@dataclass
class OracleRecord:
    mdp: int
    check: str
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.deviation <= self.tolerance)

    def as_dict(self) -> dict:
        return {"mdp": self.mdp, "check": self.check, "passed": self.passed,
                "deviation": self.deviation, "tolerance": self.tolerance}


@dataclass
class OracleReport:
    records: list[OracleRecord] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    def failures(self) -> list[OracleRecord]:
        return [r for r in self.records if not r.passed]

    def add(self, mdp: int, check: str, deviation: float, tolerance: float) -> None:
        self.records.append(OracleRecord(mdp, check, float(deviation), tolerance))

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r.as_dict(), sort_keys=True) + "\n")

    def summary(self) -> str:
        lines = [f"{'mdp':>4} {'check':<22} {'deviation':>12} {'tolerance':>10}  result"]
        for r in self.records:
            lines.append(f"{r.mdp:>4} {r.check:<22} {r.deviation:>12.3e} {r.tolerance:>10.1e}  "
                         f"{'pass' if r.passed else 'FAIL'}")
        return "\n".join(lines)


def two_state_cycle(gamma: float = 0.5) -> TabularMDP:
    """Deterministic alternation between two states starting in state 0, one action."""
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    one = np.ones((2, 1))
    return TabularMDP(P, np.array([1.0, 0.0]), gamma, one, one)


def _centered(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return x - np.sum(w * x)


def end_to_end_oracle_check(suite: list[TabularMDP] | None = None, seed: int = 0) -> OracleReport:
    """Run every tabular assertion over ``suite`` and collect measured deviations.

    Checks per MDP: flow-equation residual and normalization of both
    occupancies, KL identities, Newton convergence, ratio recovery in total
    variation, the log-ratio shape of ``r*`` after constant matching, shift
    invariance, agreement with coordinate descent and with ``-KL(d_pi || d_D)``.
    Entry ``-1`` holds the two-state-cycle closed form.
    """
    suite = default_suite(seed) if suite is None else suite
    report = OracleReport()
    cycle = stationary_distribution(two_state_cycle(0.5)).states
    report.add(-1, "cycle_closed_form", np.max(np.abs(cycle - np.array([2.0, 1.0]) / 3.0)), 1e-15)
    for i, mdp in enumerate(suite):
        d_pi = stationary_distribution(mdp, mdp.pi)
        d_data = stationary_distribution(mdp, mdp.pi_data)
        report.add(i, "flow_pi", flow_residual(mdp, mdp.pi, d_pi), 1e-10)
        report.add(i, "flow_data", flow_residual(mdp, mdp.pi_data, d_data), 1e-10)
        report.add(i, "sum_pi", abs(d_pi.d.sum() - 1.0), 1e-12)
        report.add(i, "sum_data", abs(d_data.d.sum() - 1.0), 1e-12)
        report.add(i, "kl_self", abs(exact_kl(d_pi, d_pi)), 0.0)
        kl = exact_kl(d_pi, d_data)
        report.add(i, "kl_nonnegative", max(0.0, -kl), 0.0)
        try:
            sol = tabular_inner_optimize(mdp)
        except OracleError as exc:
            report.add(i, "inner_converged", math.inf, 1e-8)
            report.records[-1].check += f" ({exc})"
            continue
        report.add(i, "inner_converged", sol.grad_norm, 1e-8)
        report.add(i, "ratio_tv", total_variation(sol.reweighted(), d_pi.flat()), 1e-3)
        w = d_data.flat()
        log_ratio = np.log(d_pi.flat() / w)
        report.add(i, "log_ratio_shape", np.max(np.abs(_centered(sol.reward, w) - _centered(log_ratio, w))), 1e-6)
        prob = InnerProblem.build(mdp)
        c = np.random.default_rng(seed + i).normal(0.0, 5.0)
        report.add(i, "shift_invariance", abs(prob.value(sol.v + c) - prob.value(sol.v)), 1e-10)
        brute = coordinate_descent_minimum(mdp, seed=seed + i)
        report.add(i, "brute_force_objective", abs(sol.objective - brute), 1e-4)
        report.add(i, "objective_is_neg_kl", abs(sol.objective + kl), 1e-8)
    return report
