"""Differentiable log-posterior for the renewal model, built on jax.

The infection recursion runs inside a ``lax.scan`` so the whole model is a
single jit-compiled function of the flat unconstrained parameter vector;
gradients come from reverse-mode differentiation of that function. The numpy
implementations in :mod:`renewcast.dynamics` define the reference semantics
and the two are held together by tests.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
from jax.scipy.special import gammaln  # noqa: E402

from .data import CovariatePanel, RegionSeries
from .dynamics import LIKELIHOOD_FLOOR, build_pi, discretize_delay
from .model import ModelConfig, ModelVariant, ParameterLayout, Priors

_EXP_CLIP = 60.0  # caps covariate log-effects; keeps the forward pass finite


@dataclass
class ModelInputs:
    """Aligned arrays for one fit: counts through the snapshot plus covariates
    extended through the forecast horizon."""

    variant: ModelVariant
    config: ModelConfig
    region_ids: list[str]
    start_date: dt.date
    snapshot_date: dt.date
    horizon_days: int
    deaths: np.ndarray  # (regions, data days)
    cases: np.ndarray  # (regions, data days)
    indicators: np.ndarray  # (regions, data+horizon days, covariates)
    population: np.ndarray  # (regions,)
    xfr_base: np.ndarray  # (regions,) fatality rate before the noise factor
    t_start: np.ndarray  # (regions,) first likelihood day index
    gen_interval: np.ndarray  # day-indexed masses, index 0 unused
    infection_to_death: np.ndarray

    @property
    def n_regions(self) -> int:
        return self.deaths.shape[0]

    @property
    def n_days(self) -> int:
        return self.deaths.shape[1]

    @property
    def n_days_total(self) -> int:
        return self.indicators.shape[1]

    def likelihood_mask(self) -> np.ndarray:
        t = np.arange(self.n_days)
        return (t[None, :] >= self.t_start[:, None]).astype(np.float64)

    def data_digest(self) -> str:
        """Hash of everything the likelihood sees; used for leakage audits."""
        import hashlib

        h = hashlib.sha256()
        h.update(self.variant.name.encode())
        h.update(str(self.start_date).encode())
        h.update(str(self.snapshot_date).encode())
        for arr in (self.deaths, self.cases, self.indicators, self.population, self.xfr_base, self.t_start):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def assemble_inputs(
    series_by_region: dict[str, RegionSeries],
    panels_by_region: dict[str, CovariatePanel],
    variant: ModelVariant,
    config: ModelConfig,
    snapshot_date: dt.date,
    horizon_days: int = 0,
    onset_to_death: tuple[float, float] | None = None,
) -> ModelInputs:
    """Stack per-region series into model arrays.

    Covariates are frozen at their value one week before the snapshot and held
    constant through the snapshot plus forecast horizon (future mobility is
    unknown at run time). Delay distributions are discretized out to the full
    modelled range.
    """
    from .ingest import extend_covariates

    if set(series_by_region) != set(panels_by_region):
        raise ValueError("series and covariate panels cover different regions")
    region_ids = sorted(series_by_region)
    start = min(series_by_region[r].start_date for r in region_ids)
    n_days = (snapshot_date - start).days + 1
    if n_days < config.n_seed_days + 1:
        raise ValueError("snapshot range too short to seed the renewal process")
    n_total = n_days + horizon_days
    end_total = snapshot_date + dt.timedelta(days=horizon_days)

    deaths = np.zeros((len(region_ids), n_days), dtype=np.int64)
    cases = np.zeros_like(deaths)
    indicators = np.zeros((len(region_ids), n_total, panels_by_region[region_ids[0]].values.shape[1]))
    population = np.zeros(len(region_ids))
    for i, rid in enumerate(region_ids):
        s = series_by_region[rid].reindexed(start, snapshot_date)
        deaths[i] = s.deaths
        cases[i] = s.cases
        population[i] = s.population
        panel = extend_covariates(panels_by_region[rid], snapshot_date, horizon_days)
        indicators[i] = panel.reindexed(start, end_total).values

    cum_deaths = deaths.cumsum(axis=1)
    t_start = np.full(len(region_ids), n_days, dtype=np.int64)
    for i in range(len(region_ids)):
        hits = np.nonzero(cum_deaths[i] >= config.death_threshold)[0]
        if hits.size:
            t_start[i] = max(int(hits[0]), config.n_seed_days)

    if variant.xfr_mode == "CFR":
        xfr_base = cum_deaths[:, -1] / np.maximum(cases.cumsum(axis=1)[:, -1], 1)
        xfr_base = np.clip(xfr_base, config.cfr_floor, 1.0)
    else:
        xfr_base = np.full(len(region_ids), config.ifr)

    if onset_to_death is None:
        onset_to_death = (config.onset_to_death_mean, config.onset_to_death_cv)
    max_lag = max(n_total - 1, 1)
    g = discretize_delay(config.generation_interval_mean, config.generation_interval_cv, max_lag)
    pi = build_pi(
        discretize_delay(config.infection_to_onset_mean, config.infection_to_onset_cv, max_lag),
        discretize_delay(onset_to_death[0], onset_to_death[1], max_lag),
        horizon=max_lag,
    )
    return ModelInputs(
        variant=variant,
        config=config,
        region_ids=region_ids,
        start_date=start,
        snapshot_date=snapshot_date,
        horizon_days=horizon_days,
        deaths=deaths,
        cases=cases,
        indicators=indicators,
        population=population,
        xfr_base=xfr_base,
        t_start=t_start,
        gen_interval=g.mass,
        infection_to_death=pi.mass,
    )


def _delay_matrix(mass: np.ndarray, n_days: int) -> np.ndarray:
    """Lower-triangular Toeplitz matrix M[t, tau] = mass[t - tau]."""
    lag = np.subtract.outer(np.arange(n_days), np.arange(n_days))
    padded = np.zeros(n_days + 1)
    upto = min(mass.size, n_days + 1)
    padded[:upto] = mass[:upto]
    return np.where((lag > 0) & (lag <= n_days), padded[np.clip(lag, 0, n_days)], 0.0)


def _nb_logpmf(y, mean, phi):
    return (
        gammaln(y + phi)
        - gammaln(phi)
        - gammaln(y + 1.0)
        + phi * (jnp.log(phi) - jnp.log(phi + mean))
        + y * (jnp.log(mean) - jnp.log(phi + mean))
    )


class Posterior:
    """Jit-compiled log-density, gradient and per-draw trajectories."""

    def __init__(self, inputs: ModelInputs, priors: Priors):
        if priors.layout.n_regions != inputs.n_regions:
            raise ValueError("prior layout does not match the number of regions")
        self.inputs = inputs
        self.priors = priors
        self.layout: ParameterLayout = priors.layout
        self.dim = self.layout.dim

        self._np_constants()
        self._logdensity = jax.jit(self._make_logdensity())
        self._value_and_grad = jax.jit(jax.value_and_grad(self._make_logdensity()))
        self._trajectories = None  # compiled on first use

    def _np_constants(self):
        inp = self.inputs
        self._g_mat = {
            n: jnp.asarray(_delay_matrix(inp.gen_interval, n))
            for n in {inp.n_days, inp.n_days_total}
        }
        self._pi_mat = {
            n: jnp.asarray(_delay_matrix(inp.infection_to_death, n))
            for n in {inp.n_days, inp.n_days_total}
        }
        self._deaths = jnp.asarray(inp.deaths, dtype=jnp.float64)
        self._cases = jnp.asarray(inp.cases, dtype=jnp.float64)
        self._indicators = jnp.asarray(inp.indicators)
        self._population = jnp.asarray(inp.population)
        self._xfr_base = jnp.asarray(inp.xfr_base)
        self._mask = jnp.asarray(inp.likelihood_mask())

    def _forward(self, pv, n_days):
        """Infections and susceptible fraction over n_days, shape (regions, days)."""
        inp = self.inputs
        m = inp.n_regions
        include_pop = inp.variant.include_susceptible_covariate
        lin = jnp.einsum("mtk,mk->mt", self._indicators[:, :n_days, :], pv.alpha_total)
        rt_mob = pv.r0[:, None] * jnp.exp(jnp.clip(-lin, -_EXP_CLIP, _EXP_CLIP))
        apop = pv.alpha_pop_total if include_pop else jnp.zeros(m)
        n_seed = inp.config.n_seed_days
        g_mat = self._g_mat[n_days]
        pop = self._population
        seed = pv.seed
        eye = jnp.eye(n_days)

        def step(carry, xs):
            c_buf, cum = carry
            g_row, r_row, e_row, is_seed = xs
            s_t = jnp.maximum(0.0, 1.0 - cum / pop)
            conv = g_row @ c_buf
            r_eff = r_row * jnp.exp(jnp.clip(-s_t * apop, -_EXP_CLIP, _EXP_CLIP))
            raw = jnp.where(is_seed, seed, s_t * r_eff * conv)
            new = jnp.minimum(raw, pop - cum)
            c_buf = c_buf + e_row[:, None] * new[None, :]
            return (c_buf, cum + new), (new, s_t)

        is_seed = jnp.arange(n_days) < n_seed
        carry0 = (jnp.zeros((n_days, m)), jnp.zeros(m))
        xs = (g_mat, rt_mob.T, eye, is_seed)
        _, (c_rows, s_rows) = jax.lax.scan(step, carry0, xs)
        infections = c_rows.T
        susceptible = s_rows.T
        rt_full = rt_mob * jnp.exp(jnp.clip(-susceptible * apop[:, None], -_EXP_CLIP, _EXP_CLIP))
        return infections, susceptible, rt_full

    def _make_logdensity(self):
        inp = self.inputs
        n_days = inp.n_days
        floor = LIKELIHOOD_FLOOR
        use_cases = inp.variant.use_case_likelihood
        pi_mat = self._pi_mat[n_days]

        def logdensity(theta):
            lp = self.priors.log_prior(theta, jnp)
            pv = self.layout.unpack(theta, jnp)
            infections, _, _ = self._forward(pv, n_days)
            xfr = self._xfr_base * pv.xfr_noise
            d = xfr[:, None] * (pi_mat @ infections.T).T
            d = jnp.maximum(d, floor)
            lp = lp + jnp.sum(self._mask * _nb_logpmf(self._deaths, d, pv.phi_deaths))
            if use_cases:
                p = jnp.maximum(infections / pv.overestimate[:, None], floor)
                lp = lp + jnp.sum(self._mask * _nb_logpmf(self._cases, p, pv.phi_cases))
            return lp

        return logdensity

    def logdensity(self, theta: np.ndarray) -> float:
        return float(self._logdensity(jnp.asarray(theta)))

    def value_and_grad(self, theta: np.ndarray):
        """Log-density and gradient; non-finite values signal a rejected state."""
        v, g = self._value_and_grad(jnp.asarray(theta))
        return float(v), np.asarray(g)

    def _make_trajectories(self):
        inp = self.inputs
        n_total = inp.n_days_total
        pi_mat = self._pi_mat[n_total]

        def one(theta):
            pv = self.layout.unpack(theta, jnp)
            infections, susceptible, rt = self._forward(pv, n_total)
            xfr = self._xfr_base * pv.xfr_noise
            d = xfr[:, None] * (pi_mat @ infections.T).T
            return infections, d, rt, susceptible

        return jax.jit(jax.vmap(one))

    def derived_trajectories(self, thetas: np.ndarray, batch: int = 512) -> dict[str, np.ndarray]:
        """Per-draw infections, expected deaths, Rt and susceptible fraction over
        the data range plus horizon, each shaped (draws, regions, days)."""
        if self._trajectories is None:
            self._trajectories = self._make_trajectories()
        thetas = np.atleast_2d(np.asarray(thetas))
        chunks = [
            self._trajectories(jnp.asarray(thetas[i : i + batch]))
            for i in range(0, thetas.shape[0], batch)
        ]
        names = ("infections", "expected_deaths", "rt", "susceptible")
        return {
            name: np.concatenate([np.asarray(ch[j]) for ch in chunks], axis=0)
            for j, name in enumerate(names)
        }

    def phi_deaths(self, thetas: np.ndarray) -> np.ndarray:
        """Death overdispersion per draw (for predictive sampling)."""
        sl = self.layout.slice_of("log_phi_deaths")
        return np.exp(np.atleast_2d(thetas)[:, sl][:, 0])
