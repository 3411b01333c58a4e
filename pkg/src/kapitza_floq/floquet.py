"""One-period propagators, quasienergies and Floquet modes with micromotion.

The period propagator is built from piecewise-constant midpoint exponentials
(Magnus order 2), which preserves unitarity exactly per step.  For long gate
evolutions a split-operator engine exploiting the ``diagonal + c(t) * fixed``
structure of the circuit Hamiltonians is provided (same order, much cheaper
per step, composable to 4th order).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linear_sum_assignment
from scipy.special import jv

from .circuit import (
    TWO_PI,
    CircuitParams,
    FluxWaveform,
    charge_operator,
    cos_k_phi,
    drive_coefficients,
    kinetic_term,
    linear_waveform,
    sin_k_phi,
)

DEFAULT_N_STEPS = 4096
DEFAULT_N_GRID = 256

#: 4th-order triple-jump composition coefficients (w1, 1 - 2 w1, w1).
_YOSHIDA_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))


class IntegratorError(RuntimeError):
    """Raised when a propagator fails its unitarity / sanity checks."""


# ---------------------------------------------------------------------------
# propagation engines
# ---------------------------------------------------------------------------


def propagate_period(
    h_of_t,
    period: float,
    n_steps: int = DEFAULT_N_STEPS,
    n_grid: int = DEFAULT_N_GRID,
    unitarity_tol: float = 1e-10,
):
    """Propagator U(t_j, 0) on a uniform grid over one period plus U(T, 0).

    ``h_of_t`` maps time (ns) to a Hermitian matrix (rad/ns).  Stepping is
    ``U <- exp(-i H(t_mid) dt) U`` with a dense eigendecomposition per step.

    Returns ``(u_grid, u_period)`` where ``u_grid[j] = U(j T / n_grid, 0)``
    for j = 0 .. n_grid-1.
    """
    if n_steps < 500:
        raise ValueError("n_steps must be >= 500 for a resolved period")
    if n_steps % n_grid != 0:
        raise ValueError("n_steps must be divisible by n_grid")
    dt = period / n_steps
    stride = n_steps // n_grid
    h0 = np.asarray(h_of_t(0.5 * dt))
    dim = h0.shape[0]
    u = np.eye(dim, dtype=complex)
    u_grid = np.empty((n_grid, dim, dim), dtype=complex)
    u_grid[0] = u
    for j in range(n_steps):
        h = np.asarray(h_of_t((j + 0.5) * dt))
        u = _expm_mul(h, dt, u)
        if (j + 1) % stride == 0 and (j + 1) < n_steps:
            u_grid[(j + 1) // stride] = u
    err = _unitarity_defect(u)
    if err > unitarity_tol:
        raise IntegratorError(f"period propagator non-unitary: defect {err:.2e}")
    return u_grid, u


def _expm_mul(h: np.ndarray, dt: float, u: np.ndarray) -> np.ndarray:
    """exp(-i h dt) @ u via Hermitian eigendecomposition."""
    if np.iscomplexobj(h):
        w, v = sla.eigh(h)
    else:
        d = np.ascontiguousarray(np.diag(h))
        e = np.ascontiguousarray(np.diag(h, 1))
        if _is_tridiagonal(h):
            w, v = sla.eigh_tridiagonal(d, e)
        else:
            w, v = sla.eigh(h)
    return (v * np.exp(-1j * w * dt)) @ (v.conj().T @ u)


def _is_tridiagonal(h: np.ndarray) -> bool:
    if h.shape[0] < 3:
        return True
    return not np.any(np.triu(h, 2))


def _unitarity_defect(u: np.ndarray) -> float:
    return np.linalg.norm(u.conj().T @ u - np.eye(u.shape[0]))


@dataclass(frozen=True)
class SplitHamiltonian:
    """H(t) = diag(a) + c_cos(t) * C + c_sin(t) * S with fixed C, S.

    ``C`` (and ``S`` when present) are prediagonalized once; a Strang step then
    costs two dense multiplies instead of an eigendecomposition.
    """

    a_diag: np.ndarray
    c_cos: object                  # callable t -> scalar
    cos_w: np.ndarray = None
    cos_v: np.ndarray = None
    c_sin: object = None
    sin_w: np.ndarray = None
    sin_v: np.ndarray = None

    cos_mat: np.ndarray = None
    sin_mat: np.ndarray = None

    @classmethod
    def from_circuit(cls, params: CircuitParams, waveform: FluxWaveform,
                     extra_cos=None) -> "SplitHamiltonian":
        """Split form of the circuit Hamiltonian; ``extra_cos(t)`` adds to the
        cos-phi prefactor (gate terms proportional to cos phi)."""
        a = np.diag(kinetic_term(params)).copy()
        cos_mat = cos_k_phi(params, 1)
        cw, cv = sla.eigh(cos_mat)

        def c_cos(t, _p=params, _w=waveform, _x=extra_cos):
            c = -_p.e_j_ang * _w.cos_mod(t)
            if _x is not None:
                c += _x(t)
            return c

        if params.delta_e != 0.0:
            sin_mat = sin_k_phi(params, 1)
            sw, sv = sla.eigh(sin_mat)

            def c_sin(t, _p=params, _w=waveform):
                return -_p.delta_e * _p.e_j_ang * _w.sin_mod(t)

            return cls(a, c_cos, cw, cv, c_sin, sw, sv, cos_mat, sin_mat)
        return cls(a, c_cos, cw, cv, cos_mat=cos_mat)

    def value(self, t: float) -> np.ndarray:
        h = np.diag(self.a_diag) + self.c_cos(t) * self.cos_mat
        if self.c_sin is not None:
            h = h.astype(complex) + self.c_sin(t) * self.sin_mat
        return h


def _strang_step(sh: SplitHamiltonian, t0: float, dt: float, u: np.ndarray) -> np.ndarray:
    tm = t0 + 0.5 * dt
    half = np.exp(-0.5j * dt * sh.a_diag)
    u = half[:, None] * u
    c = sh.c_cos(tm)
    if sh.c_sin is None:
        u = (sh.cos_v * np.exp(-1j * c * dt * sh.cos_w)) @ (sh.cos_v.conj().T @ u)
    else:
        s = sh.c_sin(tm)
        u = (sh.cos_v * np.exp(-0.5j * c * dt * sh.cos_w)) @ (sh.cos_v.conj().T @ u)
        u = (sh.sin_v * np.exp(-1j * s * dt * sh.sin_w)) @ (sh.sin_v.conj().T @ u)
        u = (sh.cos_v * np.exp(-0.5j * c * dt * sh.cos_w)) @ (sh.cos_v.conj().T @ u)
    return half[:, None] * u


def propagate_split(
    sh: SplitHamiltonian,
    t0: float,
    t1: float,
    n_steps: int,
    u0: np.ndarray | None = None,
    order: int = 4,
) -> np.ndarray:
    """Unitary over [t0, t1] with split-operator steps (order 2 or 4)."""
    dim = sh.a_diag.shape[0]
    u = np.eye(dim, dtype=complex) if u0 is None else u0.astype(complex)
    dt = (t1 - t0) / n_steps
    if order == 2:
        for j in range(n_steps):
            u = _strang_step(sh, t0 + j * dt, dt, u)
    elif order == 4:
        w1 = _YOSHIDA_W1
        w0 = 1.0 - 2.0 * w1
        for j in range(n_steps):
            t = t0 + j * dt
            u = _strang_step(sh, t, w1 * dt, u)
            u = _strang_step(sh, t + w1 * dt, w0 * dt, u)
            u = _strang_step(sh, t + (w1 + w0) * dt, w1 * dt, u)
    else:
        raise ValueError("order must be 2 or 4")
    return u


def unitary_power(u: np.ndarray, m: int) -> np.ndarray:
    """u^m by repeated squaring."""
    result = np.eye(u.shape[0], dtype=complex)
    base = u
    while m > 0:
        if m & 1:
            result = base @ result
        base = base @ base
        m >>= 1
    return result


# ---------------------------------------------------------------------------
# Floquet solution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FloquetSolution:
    """Quasienergies and time-gridded Floquet modes of a T-periodic Hamiltonian.

    ``modes[j, :, a]`` is the periodic mode ``|Phi_a(t_j)>`` on the uniform
    grid ``grid``; quasienergies are branch-reduced to ``(-omega_ang/2,
    omega_ang/2]``.  After labeling, index ``a`` follows the effective-model
    ordering and the pair gauge fixes the well-localized +- combinations.
    """

    period: float
    omega_ang: float
    quasienergies: np.ndarray     # (dim,) rad/ns
    modes: np.ndarray             # (n_grid, dim, dim)
    grid: np.ndarray              # (n_grid,) times in [0, T)
    labels: np.ndarray            # permutation applied (diagnostic)
    degenerate: bool = False

    @property
    def dim(self) -> int:
        return self.modes.shape[1]

    @property
    def n_grid(self) -> int:
        return self.grid.shape[0]

    def mode_at(self, j: int, alpha: int) -> np.ndarray:
        return self.modes[j, :, alpha]

    def state_matrix(self, j: int = 0) -> np.ndarray:
        """Columns |Phi_a(t_j)> (equal to |Psi_a> up to the e^{-i eps t} phase)."""
        return self.modes[j]


def floquet_modes(
    u_grid: np.ndarray,
    u_period: np.ndarray,
    omega_ghz: float,
    degeneracy_resolution: float = 1e-12,
) -> FloquetSolution:
    """Diagonalize U(T,0) and attach micromotion from the stored grid.

    The Schur form of the (normal) one-period propagator provides an
    orthonormal eigenbasis that is stable for near-degenerate eigenphase
    pairs.  Quasienergy branch: ``(-omega_ang/2, omega_ang/2]``.
    """
    period = 1.0 / omega_ghz
    omega_ang = TWO_PI * omega_ghz
    tmat, z = sla.schur(u_period, output="complex")
    lam = np.diag(tmat)
    offdiag = np.linalg.norm(tmat - np.diag(lam))
    if offdiag > 1e-8:
        raise IntegratorError(f"one-period propagator not normal: {offdiag:.2e}")
    eps = -np.angle(lam) / period
    # principal branch (-w/2, w/2]
    eps = np.where(eps <= -0.5 * omega_ang, eps + omega_ang, eps)

    # eigenvalue clusters closer than the resolution have an arbitrary gauge
    # within the cluster; record the fact on the solution
    gaps = np.abs(np.subtract.outer(lam, lam))
    np.fill_diagonal(gaps, np.inf)
    degenerate = bool(np.any(gaps < degeneracy_resolution))

    n_grid = u_grid.shape[0]
    grid = np.arange(n_grid) * (period / n_grid)
    # |Phi_a(t_j)> = e^{+i eps_a t_j} U(t_j, 0) |Phi_a(0)>
    phases = np.exp(1j * np.outer(grid, eps))            # (n_grid, dim)
    modes = np.einsum("jik,ka,ja->jia", u_grid, z, phases, optimize=True)
    return FloquetSolution(period=period, omega_ang=omega_ang, quasienergies=eps,
                           modes=modes, grid=grid,
                           labels=np.arange(len(eps)), degenerate=degenerate)


# ---------------------------------------------------------------------------
# effective model, labeling, gauge
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EffectiveModel:
    """Static high-frequency approximation of the driven circuit."""

    e_j_tilde: float              # rad/ns
    hamiltonian: np.ndarray
    variant: str                  # linear | cosine | disordered
    energies: np.ndarray
    states: np.ndarray            # columns, ordered like `order`
    order: np.ndarray             # pair-structured index -> energy-sorted index
    cos_expect: np.ndarray


def effective_model(
    params: CircuitParams,
    waveform: FluxWaveform,
    extra_cos_ghz: float = 0.0,
    n_levels: int = 8,
) -> EffectiveModel:
    """Time-averaged double-well Hamiltonian 4 E_C n^2 - E_J~ cos(2 phi).

    Linear drive gives ``E_J~ = E_C E_J^2 / omega^2``; junction asymmetry
    rescales it by ``(1 - delta_e^2)``; a cosine drive of amplitude alpha adds
    ``-E_J J_0(alpha) cos(phi)`` and Bessel-weighted well terms.  An extra
    static ``cos phi`` tilt (GHz) is included for gate/measurement configs.
    """
    ec = params.e_c_ang
    ej = params.e_j_ang
    w = TWO_PI * waveform.omega
    nq = charge_operator(params)
    h = 4.0 * ec * (nq @ nq)
    if waveform.kind in ("linear", "triangle"):
        e_tilde = ec * ej**2 / w**2
        variant = "linear"
        if params.delta_e != 0.0:
            e_tilde *= 1.0 - params.delta_e**2
            variant = "disordered"
        h = h - e_tilde * cos_k_phi(params, 2)
    elif waveform.kind == "cosine":
        variant = "cosine"
        e_tilde = ec * ej**2 / w**2
        bessel_sum = 0.0
        n = 1
        while True:
            term = (jv(2 * n, waveform.alpha) / n) ** 2
            bessel_sum += term
            if term < 1e-12 * max(bessel_sum, 1e-300) and n > 2:
                break
            n += 1
        h = h - ej * jv(0, waveform.alpha) * cos_k_phi(params, 1)
        h = h - e_tilde * bessel_sum * cos_k_phi(params, 2)
        e_tilde = e_tilde * bessel_sum
    else:
        raise ValueError("effective model defined for linear/triangle/cosine drives")
    if extra_cos_ghz != 0.0:
        h = h + TWO_PI * extra_cos_ghz * cos_k_phi(params, 1)

    ev, evec = sla.eigh(h)
    cosm = cos_k_phi(params, 1)
    cos_expect = np.einsum("ia,ij,ja->a", evec.conj(), cosm, evec).real
    order = _pair_structured_order(ev, cos_expect, n_levels)
    return EffectiveModel(e_j_tilde=e_tilde, hamiltonian=h, variant=variant,
                          energies=ev[order], states=evec[:, order],
                          order=order, cos_expect=cos_expect[order])


def _pair_structured_order(energies: np.ndarray, cos_expect: np.ndarray,
                           n_levels: int) -> np.ndarray:
    """Index order grouping double-well doublets.

    Delocalized doublets (symmetric wells) are already energy-adjacent.  When a
    static tilt localizes the eigenstates in one well each, the physical
    doublets interleave in energy; states are then paired as (k-th state of
    the ground's well, k-th state of the other well).
    """
    dim = len(energies)
    n_levels = min(n_levels, dim)
    base = np.arange(dim)
    local = np.abs(cos_expect[:n_levels])
    if not np.all(local > 0.5):
        return base
    ground_well = np.sign(cos_expect[0])
    same = [i for i in range(dim) if np.sign(cos_expect[i]) == ground_well]
    other = [i for i in range(dim) if np.sign(cos_expect[i]) != ground_well]
    order = []
    for k in range(min(len(same), len(other))):
        order.extend((same[k], other[k]))
    rest = [i for i in base if i not in order]
    return np.array(order + rest)


def label_and_gauge(sol: FloquetSolution, eff: EffectiveModel,
                    cos_matrix: np.ndarray | None = None,
                    n_warn_levels: int = 8) -> FloquetSolution:
    """Relabel Floquet states by effective-model overlap and fix pair phases.

    After relabeling, phases are chosen so that ``(Psi_2k + Psi_2k+1)/sqrt(2)``
    localizes at phi = 0 (positive cos-phi expectation) and the odd combination
    at phi = pi.  Applying the operation twice is a no-op.  Ambiguous overlap
    assignments among the lowest ``n_warn_levels`` levels trigger a warning
    (higher levels fold into near-degenerate free-rotor clusters where the
    assignment is immaterial).
    """
    if eff.states.shape[0] != sol.dim:
        raise ValueError("effective model dimension mismatch")
    phi0 = sol.modes[0]
    overlap = np.abs(eff.states.conj().T @ phi0) ** 2        # [n_eff, alpha]
    _, perm = linear_sum_assignment(-overlap)
    nw = min(n_warn_levels, sol.dim)
    greedy = np.argmax(overlap[:nw], axis=1)
    if len(np.unique(greedy)) != nw:
        warnings.warn("overlap assignment ambiguous among tracked levels",
                      stacklevel=2)

    eps = sol.quasienergies[perm]
    modes = sol.modes[:, :, perm]

    if cos_matrix is None:
        dim = sol.dim
        cos_matrix = np.zeros((dim, dim))
        idx = np.arange(dim - 1)
        cos_matrix[idx, idx + 1] = 0.5
        cos_matrix[idx + 1, idx] = 0.5

    # phase fixing on |Phi(0)>: even pair member canonical (largest component
    # real positive), odd member rotated so <even|cos phi|odd> is real positive.
    # This order makes the operation idempotent.
    phi0 = modes[0]
    phase = np.ones(sol.dim, dtype=complex)

    def canonical(v):
        i = int(np.argmax(np.abs(v)))
        return np.exp(-1j * np.angle(v[i]))

    for k in range(sol.dim // 2):
        a, b = 2 * k, 2 * k + 1
        phase[a] = canonical(phi0[:, a])
        cross = (phase[a] * phi0[:, a]).conj() @ cos_matrix @ phi0[:, b]
        if abs(cross) > 1e-12:
            phase[b] = np.exp(-1j * np.angle(cross))
        else:
            phase[b] = canonical(phi0[:, b])
    if sol.dim % 2:
        phase[-1] = canonical(phi0[:, -1])
    modes = modes * phase[None, None, :]
    return replace(sol, quasienergies=eps, modes=modes,
                   labels=sol.labels[perm] if sol.labels is not None else perm)


def encode(sol: FloquetSolution, c0: complex, c1: complex) -> np.ndarray:
    """Logical state c0 |Psi_0(0)> + c1 |Psi_1(0)>."""
    norm = abs(c0) ** 2 + abs(c1) ** 2
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"(c0, c1) not normalized: |c0|^2+|c1|^2 = {norm}")
    return c0 * sol.modes[0][:, 0] + c1 * sol.modes[0][:, 1]


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def solve(
    params: CircuitParams,
    waveform: FluxWaveform | None = None,
    n_steps: int = DEFAULT_N_STEPS,
    n_grid: int = DEFAULT_N_GRID,
    extra_cos_ghz: float = 0.0,
    label: bool = True,
) -> FloquetSolution:
    """Floquet solve of the driven circuit: propagate, diagonalize, label.

    ``extra_cos_ghz`` adds a static ``cos phi`` term (X-gate/measurement tilt).
    """
    wf = waveform if waveform is not None else linear_waveform(params.omega)
    if wf.kind == "blend":
        raise ValueError("blend drives are not periodic; solve the underlying drive")
    period = 1.0 / wf.omega

    extra = None
    if extra_cos_ghz != 0.0:
        val = TWO_PI * extra_cos_ghz

        def extra(_t, _v=val):
            return _v

    sh = SplitHamiltonian.from_circuit(params, wf, extra_cos=extra)

    def h_of_t(t):
        return sh.value(t)

    u_grid, u_period = propagate_period(h_of_t, period, n_steps=n_steps, n_grid=n_grid)
    sol = floquet_modes(u_grid, u_period, wf.omega)
    if label:
        eff = effective_model(params, wf, extra_cos_ghz=extra_cos_ghz)
        sol = label_and_gauge(sol, eff, cos_matrix=cos_k_phi(params, 1))
    return sol
