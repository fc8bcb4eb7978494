"""Minimum-error and unambiguous discrimination of pure states and unitaries.

The minimum-error solver restricts the problem to the span of the states and
runs a fixed-point iteration over weighted square-root measurements (for pure
states the general iterative update keeps every POVM element rank one, so the
iteration reduces to one weight per state).  Every answer carries an
optimality certificate: with Gamma = sum_j p_j rho_j Pi_j, the measurement is
optimal iff Gamma is Hermitian and Gamma - p_k rho_k >= 0 for all k.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize

from .qmath import PureState

MAX_DIM = 16


class UsdInfeasible(ValueError):
    """The states are linearly dependent, so no unambiguous measurement exists."""


@dataclass(frozen=True)
class DiscriminationProblem:
    states: tuple[PureState, ...]
    priors: tuple[float, ...]

    def __init__(self, states: Sequence[PureState], priors: Sequence[float] | None = None):
        states = tuple(states)
        if not states:
            raise ValueError("need at least one state")
        dim = states[0].dim
        if dim > MAX_DIM or any(s.dim != dim for s in states):
            raise ValueError("states must share one dimension <= 16")
        if priors is None:
            priors = [1.0 / len(states)] * len(states)
        priors = tuple(float(p) for p in priors)
        if len(priors) != len(states) or min(priors) < 0 or abs(sum(priors) - 1) > 1e-12:
            raise ValueError("priors must be a probability vector matching the states")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "priors", priors)

    @property
    def dim(self) -> int:
        return self.states[0].dim

    def matrix(self) -> np.ndarray:
        """States as columns, shape (D, n)."""
        return np.column_stack([s.amplitudes for s in self.states])


@dataclass(frozen=True)
class Povm:
    elements: tuple[np.ndarray, ...]

    def __post_init__(self):
        d = self.elements[0].shape[0]
        for e in self.elements:
            if np.linalg.eigvalsh((e + e.conj().T) / 2).min() < -1e-9:
                raise ValueError("POVM element is not positive semidefinite")
        if not np.allclose(sum(self.elements), np.eye(d), atol=1e-9, rtol=0):
            raise ValueError("POVM elements do not sum to identity")

    def probabilities(self, state: PureState) -> np.ndarray:
        psi = state.amplitudes
        p = np.array([np.vdot(psi, e @ psi).real for e in self.elements])
        return np.clip(p, 0.0, None)


@dataclass(frozen=True)
class MinErrorResult:
    success: float
    povm: Povm
    residual: float
    upper_bound: float
    iterations: int
    converged: bool

    def __iter__(self):
        # unpacks as (success, povm)
        return iter((self.success, self.povm))


@dataclass(frozen=True)
class UsdResult:
    conclusive: tuple[float, ...]
    rate: float
    povm: Povm
    reciprocal: np.ndarray = field(repr=False)

    def __iter__(self):
        return iter((self.conclusive, self.rate))


def helstrom(a: PureState, b: PureState, pa: float = 0.5) -> float:
    """Optimal success probability for two pure states."""
    ov = abs(a.inner(b)) ** 2
    return 0.5 * (1.0 + np.sqrt(max(0.0, 1.0 - 4.0 * pa * (1.0 - pa) * ov)))


def _span(psi: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    u, s, _ = np.linalg.svd(psi, full_matrices=False)
    r = int(np.sum(s > tol * max(1.0, s[0])))
    return u[:, :r]


def _inv_sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    w = np.clip(w, 1e-300, None)
    return (v / np.sqrt(w)) @ v.conj().T


def certificate(phi: np.ndarray, priors: np.ndarray, elements: Sequence[np.ndarray]) -> tuple[float, float]:
    """Return (residual, upper bound) of the optimality conditions.

    ``phi`` holds the states as columns in the space the elements act on.
    """
    gamma = sum(p * np.outer(f, f.conj()) @ e for f, p, e in zip(phi.T, priors, elements))
    herm = np.linalg.norm(gamma - gamma.conj().T, 2)
    gs = (gamma + gamma.conj().T) / 2
    worst = 0.0
    for f, p in zip(phi.T, priors):
        lam = np.linalg.eigvalsh(gs - p * np.outer(f, f.conj())).min()
        worst = max(worst, -lam)
    residual = max(herm, worst)
    # Gamma + worst*I is dual feasible, so its trace bounds the optimum.
    upper = float(np.trace(gs).real + worst * gs.shape[0])
    return float(residual), upper


def min_error(problem: DiscriminationProblem, tol: float = 1e-9, max_iter: int = 20000) -> MinErrorResult:
    """Optimal minimum-error measurement for a pure-state ensemble.

    Converged when the certificate residual drops below ``tol``; on hitting
    ``max_iter`` the best iterate is returned with ``converged=False``.
    """
    psi = problem.matrix()
    priors = np.asarray(problem.priors)
    q = _span(psi)
    phi = q.conj().T @ psi  # (r, n)
    r, n = phi.shape
    outer = np.einsum("in,jn->nij", phi, phi.conj())

    def elements_for(w):
        g2 = np.einsum("n,nij->ij", w, outer)
        gi = _inv_sqrt_psd(g2)
        vecs = gi @ phi  # column j: G^-1/2 phi_j
        return [w[j] * np.outer(vecs[:, j], vecs[:, j].conj()) for j in range(n)], vecs

    w = priors.copy()  # start from the square-root measurement
    it = 0
    residual = np.inf
    while True:
        elems, vecs = elements_for(w)
        c = np.einsum("in,in->n", phi.conj(), vecs).real ** 2 * w  # <phi_j|Pi_j|phi_j>
        if it % 10 == 0 or it >= max_iter:
            residual, upper = certificate(phi, priors, elems)
            if residual < tol or it >= max_iter:
                break
        w = priors**2 * c
        w = w / w.sum()
        it += 1

    success = float(np.dot(priors, c))
    full = [q @ e @ q.conj().T for e in elems]
    complement = np.eye(problem.dim) - q @ q.conj().T
    full[0] = full[0] + complement
    full = [(e + e.conj().T) / 2 for e in full]
    return MinErrorResult(success, Povm(tuple(full)), residual, upper, it, residual < tol)


def _is_real(states: Sequence[PureState]) -> bool:
    for s in states:
        a = s.amplitudes
        k = int(np.argmax(np.abs(a) > 1e-12))
        a = a * np.exp(-1j * np.angle(a[k]))
        if np.abs(a.imag).max() > 1e-12:
            return False
    return True


def _projective_success(bloch_m: np.ndarray, bloch: np.ndarray, priors: np.ndarray) -> np.ndarray:
    # |<m_0|psi_j>|^2 = (1 + m.r_j)/2 ; outcome 1 gets (1 - m.r_j)/2
    dots = bloch_m @ bloch.T  # (G, n)
    p0 = priors * (1 + dots) / 2
    p1 = priors * (1 - dots) / 2
    return p0.max(axis=1) + p1.max(axis=1)


def projective_grid_success(problem: DiscriminationProblem, resolution: float = 1e-4) -> float:
    """Best projective measurement for a qubit ensemble by grid search.

    Independent check for ``min_error`` on qubit problems: real ensembles
    scan the x-z great circle at ``resolution``; complex ones scan the
    sphere coarsely and refine locally down to ``resolution``.  Projective
    measurements can be beaten by POVMs, so in general this is a lower bound.
    """
    if problem.dim != 2:
        raise ValueError("grid oracle is for qubit problems only")
    paulis = [np.array([[0, 1], [1, 0]]), np.array([[0, -1j], [1j, 0]]), np.array([[1, 0], [0, -1]])]
    bloch = np.array([[np.vdot(s.amplitudes, p @ s.amplitudes).real for p in paulis] for s in problem.states])
    priors = np.asarray(problem.priors)
    if _is_real(problem.states):
        a = np.arange(0.0, np.pi, resolution)
        m = np.column_stack([np.sin(a), np.zeros_like(a), np.cos(a)])
        return float(_projective_success(m, bloch, priors).max())

    def sphere(t0, t1, f0, f1, step):
        t = np.arange(t0, t1 + step / 2, step)
        f = np.arange(f0, f1 + step / 2, step)
        tt, ff = np.meshgrid(t, f, indexing="ij")
        m = np.stack([np.sin(tt) * np.cos(ff), np.sin(tt) * np.sin(ff), np.cos(tt)], axis=-1).reshape(-1, 3)
        vals = _projective_success(m, bloch, priors)
        k = int(vals.argmax())
        return vals[k], tt.ravel()[k], ff.ravel()[k]

    best, t, f = sphere(0.0, np.pi, 0.0, 2 * np.pi, 1e-2)
    step = 1e-2
    while step > resolution:
        span = 2 * step
        step = max(step / 10, resolution)
        best, t, f = sphere(t - span, t + span, f - span, f + span, step)
    return float(best)


# -- operator discrimination --------------------------------------------------


@dataclass(frozen=True)
class ProbeSpec:
    """Probe state in C^d (x) (C^2)^copies; the unitary acts on each qubit copy."""

    ancilla_dim: int
    probe: PureState
    copies: int = 1

    def __post_init__(self):
        if self.ancilla_dim not in (1, 2):
            raise ValueError("ancilla dimension must be 1 or 2")
        if self.probe.dim != self.ancilla_dim * 2**self.copies:
            raise ValueError("probe dimension does not match d * 2**copies")


def _lift(mat: np.ndarray, d: int, copies: int) -> np.ndarray:
    out = np.eye(d)
    for _ in range(copies):
        out = np.kron(out, mat)
    return out


def operator_outputs(operators: Sequence[np.ndarray], probe: ProbeSpec) -> list[PureState]:
    """States (I (x) T^{(x)copies})|s> for each operator matrix T."""
    return [
        PureState(_lift(np.asarray(t), probe.ancilla_dim, probe.copies) @ probe.probe.amplitudes, normalize=True)
        for t in operators
    ]


def _vec_to_state(x: np.ndarray) -> PureState:
    half = x.size // 2
    v = x[:half] + 1j * x[half:]
    n = np.linalg.norm(v)
    if n < 1e-12:
        v = np.zeros(half, complex)
        v[0] = 1.0
        n = 1.0
    return PureState(v / n)


def optimize_probe(
    operators: Sequence[np.ndarray],
    priors: Sequence[float] | None = None,
    d: int = 1,
    copies: int = 1,
    starts: int = 32,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple[ProbeSpec, float]:
    """Maximize the min-error success of identifying one of ``operators``.

    Multi-start local search over normalized probe vectors; the best start
    wins, ties go to the lowest start index.
    """
    dim = d * 2**copies
    rng = np.random.default_rng(seed)

    def value(x):
        probe = ProbeSpec(d, _vec_to_state(x), copies)
        prob = DiscriminationProblem(operator_outputs(operators, probe), priors)
        return -min_error(prob, tol=1e-10, max_iter=4000).success

    best_x, best_val = None, np.inf
    for _ in range(starts):
        x0 = rng.normal(size=2 * dim)
        res = optimize.minimize(value, x0, method="Nelder-Mead", options={"xatol": tol, "fatol": tol * 1e-2, "maxiter": 4000})
        if res.fun < best_val - 1e-12:
            best_x, best_val = res.x, res.fun
    return ProbeSpec(d, _vec_to_state(best_x), copies), -best_val


def isometry_extend(s_z: PureState, s_x: PureState) -> np.ndarray:
    """Isometry V: C^2 -> C^D with V|0> = s_z and V|1> = s_x.

    The two states must be orthogonal (within 1e-9); the columns are
    symmetrically re-orthonormalized so V^dagger V = I to rounding.
    """
    ov = s_z.inner(s_x)
    if abs(ov) > 1e-9:
        raise ValueError(f"states are not orthogonal (overlap {abs(ov):.3g})")
    v = np.column_stack([s_z.amplitudes, s_x.amplitudes])
    g = v.conj().T @ v
    return v @ _inv_sqrt_psd(g)


def unambiguous_discrimination(problem: DiscriminationProblem, optimize_rates: bool = True) -> UsdResult:
    """Reciprocal-state unambiguous discrimination.

    With Gram matrix G, conclusive probabilities q are feasible iff
    G - diag(q) >= 0.  Starts from the equal-rate solution q = lambda_min(G)
    and, if ``optimize_rates``, improves the prior-weighted rate locally.
    """
    psi = problem.matrix()
    n = psi.shape[1]
    sv = np.linalg.svd(psi, compute_uv=False)
    if n > psi.shape[0] or sv.min() < 1e-9 * sv.max():
        raise UsdInfeasible("states are linearly dependent")
    gram = psi.conj().T @ psi
    recip = psi @ np.linalg.inv(gram)  # <recip_j|psi_k> = delta_jk
    priors = np.asarray(problem.priors)
    q = np.full(n, np.linalg.eigvalsh(gram).min())

    if optimize_rates and n > 1:
        def margin(x):
            return np.linalg.eigvalsh(gram - np.diag(x)).min()

        res = optimize.minimize(
            lambda x: -priors @ x,
            q,
            method="SLSQP",
            bounds=[(0.0, 1.0)] * n,
            constraints=[{"type": "ineq", "fun": margin}],
        )
        cand = np.clip(res.x, 0.0, 1.0)
        # pull back inside the feasible set if the solver overshot
        lam = 1.0
        while margin(lam * cand) < 0 and lam > 0:
            lam -= 1e-6 if lam > 0.999 else 1e-3
        cand = lam * cand
        if priors @ cand > priors @ q and margin(cand) >= 0:
            q = cand
    q = q * (1 - 1e-12)

    elems = [qi * np.outer(recip[:, j], recip[:, j].conj()) for j, qi in enumerate(q)]
    rest = np.eye(problem.dim) - sum(elems)
    w, v = np.linalg.eigh((rest + rest.conj().T) / 2)
    rest = (v * np.clip(w, 0.0, None)) @ v.conj().T
    povm = Povm(tuple(elems) + (rest,))
    return UsdResult(tuple(float(x) for x in q), float(priors @ q), povm, recip)
