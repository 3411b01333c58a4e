"""Floquet-frame operator expansions, emission lines and protection metrics.

A system operator O transformed into the Floquet frame factorizes as
``O_ab(t) = e^{i (eps_a - eps_b) t} P_ab(t)`` with ``P`` T-periodic.  The
Fourier coefficients ``O_abn`` of ``P`` (convention ``P = sum_n O_abn
e^{+i n w t}``) give the emission spectrum: transition a -> b emits at
``eps_a - eps_b + n w`` whenever that frequency is positive.  The
negative-frequency part of the expansion is the collapse operator of the
zero-temperature Floquet master equation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .circuit import TWO_PI
from .floquet import FloquetSolution

DEFAULT_N_SIDE = 64
ALIAS_GUARD = 1e-6


@dataclass(frozen=True)
class PeriodicOperator:
    """Periodic part P_ab(t_j) of a Floquet-frame operator on the time grid."""

    values: np.ndarray            # (n_grid, L, L)
    quasienergies: np.ndarray     # (L,)
    omega_ang: float
    period: float
    grid: np.ndarray
    operator_name: str = ""

    @property
    def n_levels(self) -> int:
        return self.values.shape[1]

    def full_at(self, j: int) -> np.ndarray:
        """O_ab(t_j) including the quasienergy phase factor."""
        eps = self.quasienergies
        t = self.grid[j]
        phase = np.exp(1j * np.subtract.outer(eps, eps) * t)
        return self.values[j] * phase


@dataclass(frozen=True)
class SidebandExpansion:
    """Fourier data O_abn for |n| <= n_side plus the quasienergies."""

    coeffs: np.ndarray            # (L, L, 2 n_side + 1), n-index offset by n_side
    quasienergies: np.ndarray
    omega_ang: float
    period: float
    operator_name: str = ""

    @property
    def n_side(self) -> int:
        return (self.coeffs.shape[2] - 1) // 2

    @property
    def n_levels(self) -> int:
        return self.coeffs.shape[0]

    def coeff(self, a: int, b: int, n: int) -> complex:
        return self.coeffs[a, b, n + self.n_side]

    def line_frequency(self, a: int, b: int, n: int) -> float:
        """eps_a - eps_b + n omega, rad/ns."""
        return self.quasienergies[a] - self.quasienergies[b] + n * self.omega_ang


@dataclass(frozen=True)
class EmissionLine:
    alpha: int
    beta: int
    n: int
    frequency: float              # rad/ns
    weight: float                 # |O_abn|^2
    emission_allowed: bool

    @property
    def freq_ghz(self) -> float:
        return self.frequency / TWO_PI


@dataclass(frozen=True)
class ProtectionMetrics:
    """Line-degeneracy and heating/cooling spacing figures of merit."""

    delta: float                  # |w02 - w13| rad/ns
    b_spacing: float              # |(w20+w31) - (w02+w13)|/2 rad/ns
    kappa_c: float = 0.0          # engineered cooling rate, 1/ns
    lines: dict = field(default_factory=dict)

    @property
    def delta_mhz(self) -> float:
        return self.delta / TWO_PI * 1e3

    @property
    def b_mhz(self) -> float:
        return self.b_spacing / TWO_PI * 1e3


def floquet_frame_operator(
    sol: FloquetSolution,
    op,
    n_levels: int | None = None,
    name: str = "",
) -> PeriodicOperator:
    """Periodic part <Phi_a(t_j)| O |Phi_b(t_j)> for the tracked levels.

    ``op`` is a static matrix, or an array of per-grid-point matrices for
    operators whose representation is itself time-periodic (reduced bases).
    """
    L = n_levels if n_levels is not None else sol.dim
    modes = sol.modes[:, :, :L]
    op = np.asarray(op)
    if op.ndim == 2:
        vals = np.einsum("jia,ik,jkb->jab", modes.conj(), op, modes, optimize=True)
    elif op.ndim == 3 and op.shape[0] == sol.n_grid:
        vals = np.einsum("jia,jik,jkb->jab", modes.conj(), op, modes, optimize=True)
    else:
        raise ValueError("op must be a matrix or a (n_grid, d, d) array")
    return PeriodicOperator(values=vals, quasienergies=sol.quasienergies[:L],
                            omega_ang=sol.omega_ang, period=sol.period,
                            grid=sol.grid, operator_name=name)


def sideband_coefficients(pop: PeriodicOperator,
                          n_side: int = DEFAULT_N_SIDE) -> SidebandExpansion:
    """DFT of the periodic part per (a, b), sign convention e^{+i n w t}.

    Warns when the edge coefficients are not negligible (aliasing risk).
    """
    n_grid = pop.values.shape[0]
    if n_grid < 2 * n_side + 2:
        raise ValueError("time grid too coarse for the requested sideband count")
    # P(t_j) = sum_n O_n e^{+i n w t_j}  =>  O_n = (1/N) sum_j P_j e^{-2pi i n j / N}
    fourier = np.fft.fft(pop.values, axis=0) / n_grid
    idx = [(n % n_grid) for n in range(-n_side, n_side + 1)]
    coeffs = np.transpose(fourier[idx], (1, 2, 0))
    mx = np.max(np.abs(coeffs))
    if mx > 0:
        edge = max(np.max(np.abs(coeffs[:, :, 0])), np.max(np.abs(coeffs[:, :, -1])))
        if edge > ALIAS_GUARD * mx:
            warnings.warn(
                f"sideband expansion may alias: |O(+-{n_side})| = {edge:.2e} "
                f"vs max {mx:.2e}", stacklevel=2)
    return SidebandExpansion(coeffs=coeffs, quasienergies=pop.quasienergies,
                             omega_ang=pop.omega_ang, period=pop.period,
                             operator_name=pop.operator_name)


def reconstruct(exp: SidebandExpansion, t: float) -> np.ndarray:
    """Periodic part P(t) resummed from the sidebands (trig interpolation)."""
    ns = np.arange(-exp.n_side, exp.n_side + 1)
    phases = np.exp(1j * ns * exp.omega_ang * t)
    return exp.coeffs @ phases


def emission_lines(exp: SidebandExpansion, threshold: float = 0.0,
                   n_levels: int | None = None) -> list[EmissionLine]:
    """All lines with weight >= threshold, sorted by frequency.

    Both frequency signs are retained; ``emission_allowed`` marks lines a
    zero-temperature bath can absorb (frequency > 0).
    """
    L = n_levels if n_levels is not None else exp.n_levels
    out = []
    n_side = exp.n_side
    eps = exp.quasienergies
    for a in range(L):
        for b in range(L):
            for n in range(-n_side, n_side + 1):
                w = abs(exp.coeffs[a, b, n + n_side]) ** 2
                if w < threshold or w == 0.0:
                    continue
                f = eps[a] - eps[b] + n * exp.omega_ang
                out.append(EmissionLine(alpha=a, beta=b, n=n, frequency=f,
                                        weight=w, emission_allowed=f > 0))
    out.sort(key=lambda ln: ln.frequency)
    return out


def dominant_line(exp: SidebandExpansion, a: int, b: int) -> EmissionLine:
    """Largest-weight emission-allowed line of the ordered pair (a, b)."""
    n_side = exp.n_side
    eps = exp.quasienergies
    ns = np.arange(-n_side, n_side + 1)
    freqs = eps[a] - eps[b] + ns * exp.omega_ang
    weights = np.abs(exp.coeffs[a, b]) ** 2
    weights = np.where(freqs > 0, weights, 0.0)
    if not np.any(weights > 0):
        raise ValueError(f"pair ({a},{b}) has no emission-allowed weight")
    k = int(np.argmax(weights))
    runner = np.partition(weights, -2)[-2] if len(weights) > 1 else 0.0
    if runner > 0.9 * weights[k]:
        raise ValueError(
            f"dominant line of ({a},{b}) ambiguous: two candidates within 10%")
    return EmissionLine(alpha=a, beta=b, n=int(ns[k]), frequency=float(freqs[k]),
                        weight=float(weights[k]), emission_allowed=True)


def transition_rates(exp: SidebandExpansion, n_levels: int | None = None) -> np.ndarray:
    """Gamma[a, b] = sum over emission-allowed sidebands of |O_abn|^2.

    Dimensionless; multiply by the bath coupling rate for physical rates.
    """
    L = n_levels if n_levels is not None else exp.n_levels
    n_side = exp.n_side
    ns = np.arange(-n_side, n_side + 1)
    eps = exp.quasienergies[:L]
    freqs = (eps[:, None, None] - eps[None, :, None]
             + ns[None, None, :] * exp.omega_ang)
    weights = np.abs(exp.coeffs[:L, :L]) ** 2
    return np.sum(np.where(freqs > 0, weights, 0.0), axis=2)


def negative_frequency_operator(exp: SidebandExpansion, t: float) -> np.ndarray:
    """O_-(t) in the |Psi_a(0)> basis (collapse operator of the master equation).

    Components with exactly zero frequency belong to neither frequency sign
    and are excluded (none occur at generic operating points).
    """
    terms = phased_terms(exp, part="negative")
    out = np.zeros((exp.n_levels, exp.n_levels), dtype=complex)
    for freq, mat in terms:
        out += np.exp(1j * freq * t) * mat
    return out


def phased_terms(
    exp: SidebandExpansion,
    part: str = "negative",
    prune_rel: float = 0.0,
    n_levels: int | None = None,
) -> list[tuple[float, np.ndarray]]:
    """Operator as a list of (frequency, matrix) phased terms.

    ``part`` selects the negative-frequency components (``eps_a - eps_b + n w
    < 0``), positive ones, the zero-frequency part, or ``all``.  Components
    with |O| below ``prune_rel`` times the global maximum are dropped.  Terms
    sharing the same frequency (same (a, b) pair and sideband) are merged by
    construction; distinct pairs keep their own near-degenerate frequencies.
    """
    if part not in ("negative", "positive", "zero", "all"):
        raise ValueError("part must be negative|positive|zero|all")
    L = n_levels if n_levels is not None else exp.n_levels
    n_side = exp.n_side
    eps = exp.quasienergies[:L]
    coeffs = exp.coeffs[:L, :L]
    mx = np.max(np.abs(coeffs))
    cut = prune_rel * mx
    ns = np.arange(-n_side, n_side + 1)
    freqs = (eps[:, None, None] - eps[None, :, None]
             + ns[None, None, :] * exp.omega_ang)
    mask = (np.abs(coeffs) > cut) & (coeffs != 0.0)
    if part == "negative":
        mask &= freqs < 0
    elif part == "positive":
        mask &= freqs > 0
    elif part == "zero":
        mask &= freqs == 0.0
    aa, bb, nn = np.nonzero(mask)
    fvals = freqs[aa, bb, nn]
    cvals = coeffs[aa, bb, nn]
    terms: dict[float, np.ndarray] = {}
    for f, a, b, c in zip(fvals, aa, bb, cvals):
        f = float(f)
        mat = terms.get(f)
        if mat is None:
            mat = np.zeros((L, L), dtype=complex)
            terms[f] = mat
        mat[a, b] += c
    return sorted(terms.items(), key=lambda kv: kv[0])


def sparse_phased_terms(
    exp: SidebandExpansion,
    part: str = "negative",
    prune_rel: float = 0.0,
    n_levels: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Like ``phased_terms`` but as flat arrays (freqs, rows, cols, values).

    Each retained (a, b, n) component is one entry; the dense-per-frequency
    materialization is avoided so large joint systems stay cheap.
    """
    if part not in ("negative", "positive", "zero", "all"):
        raise ValueError("part must be negative|positive|zero|all")
    L = n_levels if n_levels is not None else exp.n_levels
    n_side = exp.n_side
    eps = exp.quasienergies[:L]
    coeffs = exp.coeffs[:L, :L]
    ns = np.arange(-n_side, n_side + 1)
    freqs = (eps[:, None, None] - eps[None, :, None]
             + ns[None, None, :] * exp.omega_ang)
    mx = np.max(np.abs(coeffs))
    mask = (np.abs(coeffs) > prune_rel * mx) & (coeffs != 0.0)
    if part == "negative":
        mask &= freqs < 0
    elif part == "positive":
        mask &= freqs > 0
    elif part == "zero":
        mask &= freqs == 0.0
    aa, bb, nn = np.nonzero(mask)
    return freqs[aa, bb, nn], aa, bb, coeffs[aa, bb, nn]


def protection_metrics(
    exp: SidebandExpansion,
    kappa_c: float = 0.0,
) -> ProtectionMetrics:
    """Degeneracy Delta and heating/cooling spacing B from the dominant lines.

    Uses the largest-weight emission-allowed lines of the (0,2), (1,3), (2,0)
    and (3,1) pairs; raises if any of them is ambiguous.
    """
    l02 = dominant_line(exp, 0, 2)
    l13 = dominant_line(exp, 1, 3)
    l20 = dominant_line(exp, 2, 0)
    l31 = dominant_line(exp, 3, 1)
    delta = abs(l02.frequency - l13.frequency)
    b = abs((l20.frequency + l31.frequency) - (l02.frequency + l13.frequency)) / 2
    return ProtectionMetrics(delta=delta, b_spacing=b, kappa_c=kappa_c,
                             lines={"w02": l02, "w13": l13,
                                    "w20": l20, "w31": l31})
