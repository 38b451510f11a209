"""Exact tabular checks of the VM-IDM / IDM-labeling identities.

Tables use numpy arrays:
    transition[s, a, s']   environment kernel p(s'|s,a)
    policy[s, a]           pi(a|s)
    idm[s, s', a]          h(a|s,s')
    vm[s, s']              v(s'|s)
Rows that are undefined (zero conditioning mass) are carried in boolean
``defined`` masks rather than raised.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

NORM_TOL = 1e-12


class VerificationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TabularMDP:
    transition: np.ndarray
    initial: np.ndarray
    horizon: int

    def __post_init__(self):
        if not np.allclose(self.transition.sum(axis=2), 1.0, atol=NORM_TOL, rtol=0):
            raise ValueError("transition rows must sum to 1")
        if abs(self.initial.sum() - 1.0) > NORM_TOL:
            raise ValueError("initial distribution must sum to 1")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class TabularIDM:
    table: np.ndarray  # [s, s', a]
    defined: np.ndarray  # [s, s']


@dataclass(frozen=True)
class TabularVM:
    table: np.ndarray  # [s, s']
    defined: np.ndarray  # [s]


# generators -----------------------------------------------------------------

def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int, horizon: int, sparse: bool = False) -> TabularMDP:
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    init = rng.dirichlet(np.ones(n_states))
    if sparse:
        P = P * (rng.random(P.shape) < 0.5)
        for s in range(n_states):
            for a in range(n_actions):
                if P[s, a].sum() == 0:
                    P[s, a, rng.integers(n_states)] = 1.0
        P = P / P.sum(axis=2, keepdims=True)
    return TabularMDP(P, init, horizon)


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n_actions), size=n_states)


def random_idm(rng: np.random.Generator, n_states: int, n_actions: int) -> TabularIDM:
    table = rng.dirichlet(np.ones(n_actions), size=(n_states, n_states))
    return TabularIDM(table, np.ones((n_states, n_states), dtype=bool))


def uniform_idm(n_states: int, n_actions: int) -> TabularIDM:
    return TabularIDM(np.full((n_states, n_states, n_actions), 1.0 / n_actions), np.ones((n_states, n_states), dtype=bool))


# core computations ----------------------------------------------------------

def visitation(mdp: TabularMDP, policy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """State visitation (1/T) sum_t p^t(s) and joint p(s, a, s')."""
    step_kernel = np.einsum("sa,sat->st", policy, mdp.transition)
    p_t = mdp.initial.copy()
    total = np.zeros(mdp.n_states)
    for _ in range(mdp.horizon):
        total += p_t
        p_t = p_t @ step_kernel
    p_s = total / mdp.horizon
    joint = p_s[:, None, None] * policy[:, :, None] * mdp.transition
    return p_s, joint


def induced_idm_vm(mdp: TabularMDP, policy: np.ndarray) -> tuple[TabularIDM, TabularVM]:
    p_s, joint = visitation(mdp, policy)
    pair = joint.sum(axis=1)  # [s, s']
    idm_defined = pair > 0
    h = np.zeros((mdp.n_states, mdp.n_states, mdp.n_actions))
    np.divide(joint.transpose(0, 2, 1), pair[:, :, None], out=h, where=idm_defined[:, :, None])
    vm_defined = p_s > 0
    v = np.zeros((mdp.n_states, mdp.n_states))
    np.divide(pair, p_s[:, None], out=v, where=vm_defined[:, None])
    return TabularIDM(h, idm_defined), TabularVM(v, vm_defined)


def compose(vm: TabularVM, idm: TabularIDM) -> np.ndarray:
    """pi(a|s) = sum_s' h(a|s,s') v(s'|s); rows for undefined VM states are zero."""
    reach = (vm.table > 0) & ~idm.defined
    if np.any(reach & vm.defined[:, None]):
        s, s2 = np.argwhere(reach & vm.defined[:, None])[0]
        raise VerificationError(f"IDM undefined at ({s}, {s2}) which the VM reaches")
    return np.einsum("st,sta->sa", vm.table, idm.table)


def conditional_entropies(mdp: TabularMDP, policy: np.ndarray) -> tuple[float, float]:
    """Exact (H(a|s), H(a|s,s')) under the policy's visitation."""
    p_s, joint = visitation(mdp, policy)
    h, _ = induced_idm_vm(mdp, policy)
    h_as = -_xlogy(p_s[:, None] * policy, policy).sum()
    h_ass = -_xlogy(joint, h.table.transpose(0, 2, 1)).sum()
    return float(h_as), float(h_ass)


def _xlogy(w: np.ndarray, p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(w)
    np.multiply(w, np.log(p, out=np.zeros_like(p), where=p > 0), out=out, where=w > 0)
    return out


def weighted_kl(weight: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    """sum weight * p * log(p/q), with 0 log 0 = 0 and +inf where p > 0 = q."""
    mass = weight * p
    live = mass > 0
    if np.any(live & (q <= 0)):
        return float("inf")
    ratio = np.ones_like(p)
    np.divide(p, q, out=ratio, where=live)
    return float((mass * np.log(ratio, out=np.zeros_like(ratio), where=live)).sum())


# reports --------------------------------------------------------------------

@dataclass
class KLReport:
    lhs: float
    rhs_policy_term: float
    rhs_dynamics_term: float
    inequality_holds: bool
    equality_residual: float


def check_kl_decomposition(mdp: TabularMDP, expert: np.ndarray, h_hat: TabularIDM) -> KLReport:
    """E KL(h*||h) = E KL(pi*||pi_{v*,h}) + E KL(p(s'|s,a)||p_{v*,h}(s'|s,a))."""
    p_s, joint = visitation(mdp, expert)
    h_star, v_star = induced_idm_vm(mdp, expert)
    pair = joint.sum(axis=1)
    lhs = weighted_kl(pair[:, :, None], h_star.table, h_hat.table)

    pi_hat = compose(v_star, h_hat)
    policy_term = weighted_kl(p_s[:, None], expert, pi_hat)

    # p_{v*,h}(s'|s,a) = h(a|s,s') v*(s'|s) / pi_hat(a|s)
    model_joint = h_hat.table.transpose(0, 2, 1) * v_star.table[:, None, :]  # [s, a, s']
    dyn_model = np.zeros_like(model_joint)
    np.divide(model_joint, pi_hat[:, :, None], out=dyn_model, where=pi_hat[:, :, None] > 0)
    p_sa = p_s[:, None] * expert
    dynamics_term = weighted_kl(p_sa[:, :, None], mdp.transition, dyn_model)

    if np.isinf(lhs):
        residual = 0.0 if np.isinf(policy_term + dynamics_term) else float("inf")
    else:
        residual = abs(lhs - (policy_term + dynamics_term))
    return KLReport(lhs, policy_term, dynamics_term, bool(lhs >= policy_term - 1e-12), residual)


@dataclass
class EquivalenceReport:
    vm_idm_policy: np.ndarray
    labeling_policy: np.ndarray
    residual: float
    expert_residual: float


def labeling_optimum(mdp: TabularMDP, expert: np.ndarray, h_hat: TabularIDM) -> np.ndarray:
    """Per-state minimiser of -E_{p(s,s') h(a|s,s')} log pi(a|s).

    The cross-entropy objective decomposes over states; for each state it is
    minimised by the normalised expected label distribution, computed here
    from the joint p(s, s') rather than through v*.
    """
    p_s, joint = visitation(mdp, expert)
    pair = joint.sum(axis=1)
    label_mass = np.einsum("st,sta->sa", pair, h_hat.table)
    z = label_mass.sum(axis=1, keepdims=True)
    out = np.zeros_like(label_mass)
    np.divide(label_mass, z, out=out, where=z > 0)
    return out


def check_equivalence(mdp: TabularMDP, expert: np.ndarray, h_hat: TabularIDM) -> EquivalenceReport:
    h_star, v_star = induced_idm_vm(mdp, expert)
    pi_vm = compose(v_star, h_hat)
    pi_lab = labeling_optimum(mdp, expert, h_hat)
    live = v_star.defined
    residual = float(np.abs(pi_vm[live] - pi_lab[live]).max(initial=0.0))
    pi_star = compose(v_star, h_star)
    expert_residual = float(np.abs(pi_star[live] - expert[live]).max(initial=0.0))
    return EquivalenceReport(pi_vm, pi_lab, residual, expert_residual)


@dataclass
class TrialRecord:
    trial: int
    n_states: int
    n_actions: int
    horizon: int
    lhs: float
    policy_term: float
    dynamics_term: float
    kl_residual: float
    inequality_holds: bool
    compose_residual: float
    equivalence_residual: float
    max_norm_error: float

    def passed(self, kl_tol: float = 1e-10, eq_tol: float = 1e-12) -> bool:
        return (
            self.kl_residual < kl_tol
            and self.inequality_holds
            and self.compose_residual < eq_tol
            and self.equivalence_residual < eq_tol
            and self.max_norm_error < NORM_TOL
        )


def run_trials(n_trials: int = 100, seed: int = 0, max_states: int = 6, max_actions: int = 3, max_horizon: int = 5) -> list[TrialRecord]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_trials):
        nS = int(rng.integers(2, max_states + 1))
        nA = int(rng.integers(2, max_actions + 1))
        T = int(rng.integers(1, max_horizon + 1))
        mdp = random_mdp(rng, nS, nA, T)
        expert = random_policy(rng, nS, nA)
        h_hat = random_idm(rng, nS, nA)
        kl = check_kl_decomposition(mdp, expert, h_hat)
        eq = check_equivalence(mdp, expert, h_hat)
        h_star, v_star = induced_idm_vm(mdp, expert)
        norm_err = max(
            np.abs(h_star.table.sum(axis=2)[h_star.defined] - 1).max(initial=0),
            np.abs(v_star.table.sum(axis=1)[v_star.defined] - 1).max(initial=0),
            np.abs(eq.vm_idm_policy.sum(axis=1)[v_star.defined] - 1).max(initial=0),
        )
        out.append(TrialRecord(
            i, nS, nA, T, kl.lhs, kl.rhs_policy_term, kl.rhs_dynamics_term,
            kl.equality_residual, kl.inequality_holds, eq.expert_residual, eq.residual, float(norm_err),
        ))
    return out


def format_report(trials: list[TrialRecord]) -> str:
    """One JSON record per trial, one line each."""
    return "".join(json.dumps(asdict(t), sort_keys=True) + "\n" for t in trials)
