"""Finite-key analysis for the one-decoy BB84 protocol.

Statistical fluctuations of the per-intensity counts are bounded with
Hoeffding's inequality; the phase-error rate uses the random-sampling
bound between the Z and X single-photon populations.  With ``tau_n`` the
probability that a pulse carries ``n`` photons (averaged over intensities):

    s_z0 >= tau_0 / (mu - nu) * (mu n^-_nu - nu n^+_mu)
    s_z1 >= tau_1 mu / (nu (mu - nu)) * (n^-_nu - (nu/mu)^2 n^+_mu
                                         - (mu^2 - nu^2)/mu^2 * s_z0^u / tau_0)
    v_x1 <= tau_1 / (mu - nu) * (m^+_mu - m^-_nu)

where ``n^{+-}_k = e^k / p_k * (n_k +- sqrt(n_tot/2 * ln(c/eps)))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DomainError
from .link import SourceConfig, TallyBlock, qber


@dataclass(frozen=True)
class EpsilonBudget:
    """How the secrecy parameter is spread over the estimates.

    ``hoeffding`` and ``sampling`` are the constants ``c`` in the
    ``ln(c / eps_sec)`` terms of the count bounds and the phase-error
    sampling bound; ``privacy`` is the constant of the key-length penalty
    ``6 log2(privacy / eps_sec)``.
    """

    hoeffding: float = 21.0
    sampling: float = 21.0
    privacy: float = 19.0


@dataclass(frozen=True)
class SecurityParams:
    eps_sec: float = 1e-9
    eps_cor: float = 1e-9
    f_ec: float = 1.16
    n_pulses: float = 1e10
    rep_rate: float = 50e6
    budget: EpsilonBudget = field(default_factory=EpsilonBudget)

    def __post_init__(self):
        if not (0 < self.eps_sec < 1 and 0 < self.eps_cor < 1):
            raise DomainError("epsilons must lie in (0, 1)")
        if self.f_ec < 1:
            raise DomainError("f_ec must be at least 1")
        if self.n_pulses < 1 or not self.rep_rate > 0:
            raise DomainError("need n_pulses >= 1 and a positive rep_rate")

    @property
    def acquisition_time(self) -> float:
        return self.n_pulses / self.rep_rate


@dataclass(frozen=True)
class DecoyBounds:
    s_z0_l: float
    s_z1_l: float
    phi_z_u: float
    s_z0_u: float = 0.0
    s_x1_l: float = 0.0
    v_x1_u: float = 0.0


@dataclass(frozen=True)
class KeyRateReport:
    s_z0_l: float
    s_z1_l: float
    phi_z_u: float
    lambda_ec: float
    l: float
    skr: float
    floor_binds: bool


def binary_entropy(x: float) -> float:
    """Shannon entropy of a biased coin, in bits."""
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"binary entropy needs x in [0, 1], got {x!r}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def _tau(n: int, src: SourceConfig) -> float:
    return sum(
        p * math.exp(-k) * k**n / math.factorial(n)
        for k, p in zip(src.intensities, src.intensity_probs)
    )


def _spread(total: float, eps: float, c: float) -> float:
    return math.sqrt(total / 2.0 * math.log(c / eps))


def _vacuum_lower(n_mu_plus, n_nu_minus, src, tau0):
    mu, nu = src.intensities
    return tau0 / (mu - nu) * (mu * n_nu_minus - nu * n_mu_plus)


def _single_lower(n_mu_plus, n_nu_minus, s0_upper, src, tau0, tau1):
    mu, nu = src.intensities
    return (
        tau1
        * mu
        / (nu * (mu - nu))
        * (
            n_nu_minus
            - (nu / mu) ** 2 * n_mu_plus
            - (mu**2 - nu**2) / mu**2 * s0_upper / tau0
        )
    )


def sampling_gap(eps: float, ratio: float, s_z: float, s_x: float, c: float = 21.0) -> float:
    """Deviation between the observed X single-photon error ratio and the Z phase error."""
    if ratio <= 0.0 or ratio >= 1.0:
        return 0.0
    b = ratio * (1.0 - ratio)
    inner = (s_z + s_x) / (s_z * s_x * b) * c**2 / eps**2
    return math.sqrt((s_z + s_x) * b / (s_z * s_x * math.log(2)) * math.log2(inner))


def decoy_bounds(
    t: TallyBlock, src: SourceConfig, p: SecurityParams, finite: bool = True
) -> DecoyBounds:
    """Lower bounds on vacuum and single-photon Z events and the phase-error upper bound.

    With ``finite=False`` every fluctuation term is dropped, giving the
    asymptotic estimates for the same tallies.
    """
    mu, nu = src.intensities
    p_mu, p_nu = src.intensity_probs
    if not mu > nu > 0:
        raise DomainError("one-decoy bounds need mu > nu > 0")
    if (t.n <= 0).any() or p_mu <= 0 or p_nu <= 0:
        raise DomainError("every basis/intensity category needs detections")
    eps = p.eps_sec
    c = p.budget.hoeffding
    scale = (math.exp(mu) / p_mu, math.exp(nu) / p_nu)
    tau0, tau1 = _tau(0, src), _tau(1, src)

    def corrected(values, total):
        d = _spread(total, eps, c) if finite else 0.0
        plus_mu = scale[0] * (values[0] + d)
        minus_nu = scale[1] * (values[1] - d)
        return plus_mu, minus_nu, d

    nz, nx = t.n
    mz, mx = t.m

    nz_mu_p, nz_nu_m, dz = corrected(nz, nz.sum())
    s_z0_l = _vacuum_lower(nz_mu_p, nz_nu_m, src, tau0)
    # vacuum events show errors half the time; bound them via the decoy errors
    s_z0_u = 2.0 * (tau0 * scale[1] * mz[1] + dz)
    s_z1_l = _single_lower(nz_mu_p, nz_nu_m, s_z0_u, src, tau0, tau1)

    nx_mu_p, nx_nu_m, dx = corrected(nx, nx.sum())
    s_x0_u = 2.0 * (tau0 * scale[1] * mx[1] + dx)
    s_x1_l = _single_lower(nx_mu_p, nx_nu_m, s_x0_u, src, tau0, tau1)

    dmx = _spread(mx.sum(), eps, c) if finite else 0.0
    mx_mu_p = scale[0] * (mx[0] + dmx)
    mx_nu_m = scale[1] * (mx[1] - dmx)
    v_x1_u = tau1 / (mu - nu) * (mx_mu_p - mx_nu_m)

    if s_x1_l <= 0 or s_z1_l <= 0:
        phi = 0.5
    else:
        ratio = min(max(v_x1_u / s_x1_l, 0.0), 0.5)
        gap = sampling_gap(eps, ratio, s_z1_l, s_x1_l, p.budget.sampling) if finite else 0.0
        phi = min(ratio + gap, 0.5)

    return DecoyBounds(
        s_z0_l=float(max(s_z0_l, 0.0)),
        s_z1_l=float(max(s_z1_l, 0.0)),
        phi_z_u=float(phi),
        s_z0_u=float(s_z0_u),
        s_x1_l=float(max(s_x1_l, 0.0)),
        v_x1_u=float(max(v_x1_u, 0.0)),
    )


def lambda_ec(t: TallyBlock, p: SecurityParams) -> float:
    """Error-correction leakage ``f_ec * n_Z * h(QBER_Z)``."""
    n_z = float(t.n[0].sum())
    if n_z <= 0:
        raise DomainError("no Z-basis detections")
    return p.f_ec * n_z * binary_entropy(qber(t, "Z"))


def secret_key_length(b: DecoyBounds, lam: float, p: SecurityParams) -> KeyRateReport:
    penalty = 6.0 * math.log2(p.budget.privacy / p.eps_sec) + math.log2(2.0 / p.eps_cor)
    raw = b.s_z0_l + b.s_z1_l * (1.0 - binary_entropy(b.phi_z_u)) - lam - penalty
    length = max(raw, 0.0)
    return KeyRateReport(
        s_z0_l=b.s_z0_l,
        s_z1_l=b.s_z1_l,
        phi_z_u=b.phi_z_u,
        lambda_ec=float(lam),
        l=float(length),
        skr=float(length * p.rep_rate / p.n_pulses),
        floor_binds=bool(raw <= 0.0),
    )


def key_rate(
    t: TallyBlock, src: SourceConfig, p: SecurityParams, include_vacuum: bool = True
) -> KeyRateReport:
    """Full pipeline from tallies to secret key rate."""
    b = decoy_bounds(t, src, p)
    if not include_vacuum:
        b = DecoyBounds(0.0, b.s_z1_l, b.phi_z_u, b.s_z0_u, b.s_x1_l, b.v_x1_u)
    return secret_key_length(b, lambda_ec(t, p), p)
