"""Deterministic pieces of the renewal model.

Discretized delay distributions, the self-exciting infection recursion, the
infection-to-death convolution, the covariate-driven reproduction number and
the negative-binomial count likelihood. Everything here is a pure numpy
function; the differentiable versions used by the sampler live in
:mod:`renewcast.posterior` and are tested against these.

Delay distributions are stored as daily probability masses indexed by whole
days, with index 0 meaning a same-day delay and always carrying zero mass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gammaln

LIKELIHOOD_FLOOR = 1e-9


@dataclass(frozen=True)
class DiscreteDelay:
    """Daily delay-probability masses; ``mass[s]`` is the weight of an s-day delay."""

    mass: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=np.float64)
        object.__setattr__(self, "mass", m)
        if m.ndim != 1 or m.size < 2:
            raise ValueError("delay mass must be 1-d with at least day indices 0..1")
        if m[0] != 0.0:
            raise ValueError("day-0 delay mass must be zero")
        if (m < 0).any():
            raise ValueError("delay masses must be non-negative")
        total = m.sum()
        if not 0.0 < total <= 1.0 + 1e-12:
            raise ValueError(f"delay masses must sum to (0, 1], got {total}")

    @property
    def max_day(self) -> int:
        return self.mass.size - 1

    def total(self) -> float:
        return float(self.mass.sum())

    def truncated(self, horizon: int) -> "DiscreteDelay":
        """Keep masses for days 1..horizon, zero-padding if the horizon is longer."""
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        out = np.zeros(horizon + 1)
        keep = min(horizon, self.max_day)
        out[: keep + 1] = self.mass[: keep + 1]
        return DiscreteDelay(out)


def gamma_mean_cv(mean_days: float, cv: float):
    """Shape/scale of a Gamma distribution given its mean and coefficient of variation."""
    if mean_days <= 0 or cv <= 0:
        raise ValueError(f"mean and cv must be positive, got mean={mean_days}, cv={cv}")
    shape = 1.0 / cv**2
    scale = mean_days * cv**2
    return shape, scale


def discretize_delay(mean_days: float, cv: float, horizon: int) -> DiscreteDelay:
    """Discretize a Gamma(mean, cv) delay onto whole days 1..horizon.

    Day 1 takes all mass up to 1.5 days; day s takes the mass between
    s - 0.5 and s + 0.5. Tail mass beyond the horizon is dropped, so the
    result may sum to less than one.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    shape, scale = gamma_mean_cv(mean_days, cv)
    edges = np.arange(1, horizon + 1) + 0.5
    cdf = stats.gamma.cdf(edges, a=shape, scale=scale)
    mass = np.diff(cdf, prepend=0.0)
    return DiscreteDelay(np.concatenate(([0.0], mass)))


def build_pi(first: DiscreteDelay, second: DiscreteDelay, horizon: int | None = None) -> DiscreteDelay:
    """Compose two delay stages by discrete convolution (e.g. infection-to-onset
    followed by onset-to-death), optionally truncating at ``horizon`` days."""
    mass = np.convolve(first.mass, second.mass)
    out = DiscreteDelay(mass)
    if horizon is not None:
        out = out.truncated(horizon)
    return out


def compute_rt(
    r0: np.ndarray,
    alpha_total: np.ndarray,
    indicators: np.ndarray,
    alpha_pop_total: np.ndarray | None = None,
    susceptible: np.ndarray | None = None,
) -> np.ndarray:
    """Reproduction number driven log-linearly by covariates.

    ``R[m, t] = r0[m] * exp(-sum_k indicators[m, t, k] * alpha_total[m, k]
    - susceptible[m, t] * alpha_pop_total[m])``; the susceptible term is applied
    only when both ``alpha_pop_total`` and ``susceptible`` are given.
    """
    r0 = np.asarray(r0, dtype=np.float64)
    indicators = np.asarray(indicators, dtype=np.float64)
    alpha_total = np.asarray(alpha_total, dtype=np.float64)
    n_regions = r0.shape[0]
    if indicators.ndim != 3 or indicators.shape[0] != n_regions:
        raise ValueError(f"indicators must be (regions, days, covariates), got {indicators.shape}")
    if alpha_total.shape != (n_regions, indicators.shape[2]):
        raise ValueError(
            f"alpha_total shape {alpha_total.shape} does not match indicators {indicators.shape}"
        )
    exponent = np.einsum("mtk,mk->mt", indicators, alpha_total)
    if alpha_pop_total is not None:
        if susceptible is None:
            raise ValueError("susceptible series required when alpha_pop_total is given")
        susceptible = np.asarray(susceptible, dtype=np.float64)
        if susceptible.shape != exponent.shape:
            raise ValueError(
                f"susceptible shape {susceptible.shape} does not align with days {exponent.shape}"
            )
        exponent = exponent + susceptible * np.asarray(alpha_pop_total)[:, None]
    return r0[:, None] * np.exp(-exponent)


def renewal_infections(
    seed: np.ndarray,
    rt: np.ndarray,
    g: DiscreteDelay,
    n_seed_days: int,
    population: np.ndarray,
    susceptible_alpha: np.ndarray | None = None,
):
    """Run the renewal recursion forward, returning infections and the
    susceptible fraction, both shaped (regions, days).

    The first ``n_seed_days`` days are pinned at ``seed``. Afterwards
    ``c[t] = S[t] * R[t] * sum_{s>=1} c[t-s] * g[s]`` with
    ``S[t] = max(0, 1 - cumulative/population)``. New infections are capped at
    the remaining susceptible pool so cumulative infections never exceed the
    population. When ``susceptible_alpha`` is given, ``rt`` is taken as the
    mobility-only reproduction number and the susceptible covariate feedback
    ``exp(-S[t] * susceptible_alpha)`` is applied inside the recursion.
    """
    if n_seed_days < 1:
        raise ValueError("n_seed_days must be >= 1")
    rt = np.asarray(rt, dtype=np.float64)
    squeeze = rt.ndim == 1
    seed = np.atleast_1d(np.asarray(seed, dtype=np.float64))
    rt = np.atleast_2d(rt)
    population = np.atleast_1d(np.asarray(population, dtype=np.float64))
    n_regions, n_days = rt.shape
    gm = g.mass
    c = np.zeros((n_regions, n_days))
    sus = np.ones((n_regions, n_days))
    cum = np.zeros(n_regions)
    for t in range(n_days):
        s_t = np.maximum(0.0, 1.0 - cum / population)
        sus[:, t] = s_t
        if t < n_seed_days:
            new = np.minimum(seed, population - cum)
        else:
            lo = max(0, t - g.max_day)
            # conv[m] = sum_{tau=lo..t-1} c[m, tau] * g[t - tau]
            conv = c[:, lo:t] @ gm[t - lo : 0 : -1]
            r_eff = rt[:, t]
            if susceptible_alpha is not None:
                r_eff = r_eff * np.exp(-s_t * np.asarray(susceptible_alpha))
            new = np.minimum(s_t * r_eff * conv, population - cum)
        c[:, t] = new
        cum += new
    if squeeze:
        return c[0], sus[0]
    return c, sus


def expected_deaths(
    infections: np.ndarray,
    pi: DiscreteDelay,
    fatality_rate,
    floor: float = LIKELIHOOD_FLOOR,
) -> np.ndarray:
    """Expected daily deaths: fatality rate times past infections weighted by the
    infection-to-death delay, floored at a small epsilon for likelihood stability."""
    infections = np.asarray(infections, dtype=np.float64)
    squeeze = infections.ndim == 1
    infections = np.atleast_2d(infections)
    if (infections < 0).any():
        raise ValueError("infections must be non-negative")
    rate = np.atleast_1d(np.asarray(fatality_rate, dtype=np.float64))
    if (rate <= 0).any():
        raise ValueError("fatality rate must be positive")
    n_days = infections.shape[1]
    d = np.stack([np.convolve(row, pi.mass)[:n_days] for row in infections])
    d *= rate[:, None]
    d = np.maximum(d, floor)
    return d[0] if squeeze else d


def neg_binomial_logpmf(y, mean, phi):
    """Log-pmf of the negative binomial with E = mean and Var = mean + mean^2/phi."""
    y = np.asarray(y)
    mean = np.asarray(mean, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if np.any(mean <= 0):
        raise ValueError("mean must be positive")
    if np.any(phi <= 0):
        raise ValueError("phi must be positive")
    if np.any(y < 0):
        raise ValueError("counts must be non-negative")
    return (
        gammaln(y + phi)
        - gammaln(phi)
        - gammaln(y + 1.0)
        + phi * (np.log(phi) - np.log(phi + mean))
        + y * (np.log(mean) - np.log(phi + mean))
    )
