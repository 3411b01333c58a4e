"""Charge-basis operators and time-dependent Hamiltonians of the driven SQUID qubit.

Conventions used throughout the package:

* Config-level frequencies are ordinary frequencies in GHz (a value ``x``
  means ``x = omega / 2 pi``).
* All operator entries are angular frequencies in rad/ns, i.e. ``2 pi * GHz``.
* Time is in ns.  The drive period is ``T = 1 / omega_ghz`` ns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi

#: Paper operating point: E_J/2pi = 100 GHz, omega/2pi = 10 GHz, E_C/2pi = 10 MHz.
DEFAULT_E_J = 100.0
DEFAULT_E_C = 0.01
DEFAULT_OMEGA = 10.0


@dataclass(frozen=True)
class CircuitParams:
    """Physical constants of one flux-driven SQUID circuit.

    Parameters
    ----------
    e_j:
        Josephson energy, ordinary frequency in GHz.
    e_c:
        Charging energy in GHz.
    omega:
        Flux drive frequency in GHz.
    n_g:
        Dimensionless offset charge.
    delta_e:
        Junction-energy asymmetry ``(E_J1 - E_J2) / (E_J1 + E_J2)``, in [0, 1).
    c_ratio:
        Capacitance ratio ``C_1 / C_Sigma`` in (0, 1).  After the symmetrizing
        frame change the Hamiltonian no longer depends on it; kept for
        completeness of the circuit description.
    n_max:
        Charge-basis cutoff; the basis spans ``n = -n_max .. n_max``.
    """

    e_j: float = DEFAULT_E_J
    e_c: float = DEFAULT_E_C
    omega: float = DEFAULT_OMEGA
    n_g: float = 0.0
    delta_e: float = 0.0
    c_ratio: float = 0.5
    n_max: int = 40

    def __post_init__(self) -> None:
        if self.e_j <= 0 or self.e_c <= 0 or self.omega <= 0:
            raise ValueError("e_j, e_c and omega must be positive")
        if not 0.0 <= self.delta_e < 1.0:
            raise ValueError("delta_e must lie in [0, 1)")
        if not 0.0 < self.c_ratio < 1.0:
            raise ValueError("c_ratio must lie in (0, 1)")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")

    @property
    def dim(self) -> int:
        return 2 * self.n_max + 1

    @property
    def e_j_ang(self) -> float:
        """Josephson energy as angular frequency (rad/ns)."""
        return TWO_PI * self.e_j

    @property
    def e_c_ang(self) -> float:
        return TWO_PI * self.e_c

    @property
    def omega_ang(self) -> float:
        return TWO_PI * self.omega

    @property
    def period(self) -> float:
        """Drive period in ns."""
        return 1.0 / self.omega

    def with_(self, **kwargs) -> "CircuitParams":
        return replace(self, **kwargs)


# ---------------------------------------------------------------------------
# flux waveforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FluxWaveform:
    """External flux phase phi_ext(t) entering the junction cosines.

    ``kind`` is one of:

    * ``linear``  -- phi_ext(t) = omega t (sawtooth-free idealization)
    * ``triangle`` -- 4pi-periodic triangle with the same cos phi_ext(t)
    * ``cosine``  -- phi_ext(t) = alpha cos(omega t)
    * ``blend``   -- cos phi_ext replaced by an envelope-weighted mix of two
      waveforms' modulations (used for the frequency-switch gate drive and
      the adiabatic turn-on ramp)

    The Hamiltonian consumes the waveform only through ``cos_mod(t)`` and
    ``sin_mod(t)``, the cos/sin of the flux phase (for a blend, the mixed
    modulation amplitudes).
    """

    kind: str = "linear"
    omega: float = DEFAULT_OMEGA  # GHz
    alpha: float = 0.0            # cosine amplitude, radians
    blend_a: "FluxWaveform | None" = None
    blend_b: "FluxWaveform | None" = None
    envelope: "object | None" = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "triangle", "cosine", "blend"):
            raise ValueError(f"unknown waveform kind {self.kind!r}")
        if self.kind == "blend" and (self.blend_a is None or self.blend_b is None
                                     or self.envelope is None):
            raise ValueError("blend waveform needs two waveforms and an envelope")

    @property
    def omega_ang(self) -> float:
        return TWO_PI * self.omega

    def phi_ext(self, t: float) -> float:
        """Flux phase in radians (not defined for blends)."""
        if self.kind == "linear":
            return self.omega_ang * t
        if self.kind == "triangle":
            u = math.fmod(self.omega_ang * t, 4.0 * math.pi)
            if u < 0.0:
                u += 4.0 * math.pi
            return u if u < TWO_PI else 4.0 * math.pi - u
        if self.kind == "cosine":
            return self.alpha * math.cos(self.omega_ang * t)
        raise ValueError("blend waveform has no single flux phase")

    def cos_mod(self, t: float) -> float:
        if self.kind == "blend":
            s = self.envelope(t)
            return (1.0 - s) * self.blend_a.cos_mod(t) + s * self.blend_b.cos_mod(t)
        return math.cos(self.phi_ext(t))

    def sin_mod(self, t: float) -> float:
        if self.kind == "blend":
            s = self.envelope(t)
            return (1.0 - s) * self.blend_a.sin_mod(t) + s * self.blend_b.sin_mod(t)
        return math.sin(self.phi_ext(t))


def linear_waveform(omega: float = DEFAULT_OMEGA) -> FluxWaveform:
    return FluxWaveform(kind="linear", omega=omega)


def triangle_waveform(omega: float = DEFAULT_OMEGA) -> FluxWaveform:
    return FluxWaveform(kind="triangle", omega=omega)


def cosine_waveform(alpha: float, omega: float = DEFAULT_OMEGA) -> FluxWaveform:
    return FluxWaveform(kind="cosine", omega=omega, alpha=alpha)


def blend_waveform(a: FluxWaveform, b: FluxWaveform, envelope) -> FluxWaveform:
    """Mix two waveforms' modulation amplitudes with weight ``envelope(t)`` on ``b``."""
    return FluxWaveform(kind="blend", omega=b.omega, blend_a=a, blend_b=b,
                        envelope=envelope)


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def charge_operator(params: CircuitParams) -> np.ndarray:
    """Diagonal matrix of (n - n_g) in the truncated charge basis."""
    n = np.arange(-params.n_max, params.n_max + 1, dtype=float)
    return np.diag(n - params.n_g)


def cos_k_phi(params: CircuitParams, k: int) -> np.ndarray:
    """Matrix of cos(k phi) -- 1/2 on the k-th off-diagonals.

    Raises ``ValueError`` for k > 2 n_max, where the operator truncates to zero.
    """
    if k < 1:
        raise ValueError("k must be a positive integer")
    if k > 2 * params.n_max:
        raise ValueError(f"cos({k} phi) vanishes identically at n_max={params.n_max}")
    dim = params.dim
    m = np.zeros((dim, dim))
    idx = np.arange(dim - k)
    m[idx, idx + k] = 0.5
    m[idx + k, idx] = 0.5
    return m


def sin_k_phi(params: CircuitParams, k: int) -> np.ndarray:
    """Matrix of sin(k phi) -- +-i/2 on the k-th off-diagonals (Hermitian)."""
    if k < 1:
        raise ValueError("k must be a positive integer")
    if k > 2 * params.n_max:
        raise ValueError(f"sin({k} phi) vanishes identically at n_max={params.n_max}")
    dim = params.dim
    m = np.zeros((dim, dim), dtype=complex)
    idx = np.arange(dim - k)
    # e^{i k phi} raises the charge by k; sin = (e^{ik phi} - e^{-ik phi}) / 2i
    m[idx + k, idx] = -0.5j
    m[idx, idx + k] = 0.5j
    return m


def parity_operator(params: CircuitParams) -> np.ndarray:
    """Charge parity sum_n |-n><n| (anti-diagonal permutation)."""
    return np.eye(params.dim)[::-1].copy()


def kinetic_term(params: CircuitParams) -> np.ndarray:
    """4 E_C (n - n_g)^2, diagonal, in rad/ns."""
    nq = np.diag(charge_operator(params))
    return np.diag(4.0 * params.e_c_ang * nq**2)


def hamiltonian_at(params: CircuitParams, waveform: FluxWaveform, t: float) -> np.ndarray:
    """Full circuit Hamiltonian at time t (rad/ns).

    For a symmetric SQUID (delta_e = 0) this is
    ``4 E_C (n - n_g)^2 - E_J cos(phi_ext(t)) cos(phi)``.  Junction asymmetry
    adds ``- delta_e E_J sin(phi_ext(t)) sin(phi)`` in the symmetrized frame
    (the term proportional to d phi_ext/dt n is dropped; it can be nulled by
    the gate voltage).
    """
    h = kinetic_term(params).astype(complex)
    h -= params.e_j_ang * waveform.cos_mod(t) * cos_k_phi(params, 1)
    if params.delta_e != 0.0:
        h -= params.delta_e * params.e_j_ang * waveform.sin_mod(t) * sin_k_phi(params, 1)
    return h


def drive_coefficients(params: CircuitParams, waveform: FluxWaveform, t) -> tuple:
    """Scalar prefactors (c_cos, c_sin) of the cos/sin phi terms at time(s) t.

    ``H(t) = kinetic + c_cos(t) cos(phi) + c_sin(t) sin(phi)``; vectorized in t.
    """
    t = np.asarray(t, dtype=float)
    cos_m = np.vectorize(waveform.cos_mod)(t)
    c_cos = -params.e_j_ang * cos_m
    if params.delta_e != 0.0:
        sin_m = np.vectorize(waveform.sin_mod)(t)
        c_sin = -params.delta_e * params.e_j_ang * sin_m
    else:
        c_sin = np.zeros_like(c_cos)
    return c_cos, c_sin


def two_qubit_coupling(params1: CircuitParams, params2: CircuitParams) -> np.ndarray:
    """cos(phi_1 - phi_2) on the tensor-product charge basis."""
    c1 = cos_k_phi(params1, 1)
    s1 = sin_k_phi(params1, 1)
    c2 = cos_k_phi(params2, 1)
    s2 = sin_k_phi(params2, 1)
    return np.kron(c1, c2) + np.real(np.kron(s1, s2))


def two_qubit_hamiltonian_at(
    params1: CircuitParams,
    params2: CircuitParams,
    alpha_xx: float,
    envelope: float,
    t: float,
    waveform1: FluxWaveform | None = None,
    waveform2: FluxWaveform | None = None,
) -> np.ndarray:
    """Joint Hamiltonian of two coupled driven SQUIDs at time t.

    ``alpha_xx`` is the coupling strength in GHz; ``envelope`` the instantaneous
    pulse value in [0, 1].  Both drives must share the same frequency.
    """
    if params1.omega != params2.omega:
        raise ValueError("two-qubit drive frequencies must match")
    wf1 = waveform1 if waveform1 is not None else linear_waveform(params1.omega)
    wf2 = waveform2 if waveform2 is not None else linear_waveform(params2.omega)
    h1 = hamiltonian_at(params1, wf1, t)
    h2 = hamiltonian_at(params2, wf2, t)
    id1 = np.eye(params1.dim)
    id2 = np.eye(params2.dim)
    h = np.kron(h1, id2) + np.kron(id1, h2)
    if alpha_xx != 0.0 and envelope != 0.0:
        h = h + TWO_PI * alpha_xx * envelope * two_qubit_coupling(params1, params2)
    return h
