"""Model variants, prior configuration and the sampled-parameter layout.

The sampler works on a flat unconstrained vector. Positive quantities are
sampled as logs (with the Jacobian folded into the log-prior) and the
per-region covariate effects are sampled non-centered (standard-normal
coordinates scaled by a half-normal hierarchical scale), which keeps the
posterior geometry tractable when a covariate is weakly informed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

EULER_GAMMA = 0.5772156649015329
# log-scale standard deviations of the transformed priors, used both as the
# floor reference for sequential prior updates and to bound cold-start inits
SD_LOG_HALF_NORMAL = math.sqrt(math.pi**2 / 8.0)  # sd of log|Z|, Z ~ N(0,1)
SD_LOG_EXPONENTIAL = math.pi / math.sqrt(6.0)  # sd of log X, X ~ Exp(rate)
MEAN_LOG_HALF_NORMAL = -(EULER_GAMMA + math.log(2.0)) / 2.0  # E[log|Z|]


@dataclass(frozen=True)
class ModelVariant:
    """Which likelihood terms and data treatments a model run uses."""

    name: str
    use_case_likelihood: bool
    overestimate_mode: str  # "fixed_one" | "inferred"
    xfr_mode: str  # "IFR" | "CFR"
    augment_last_week: bool

    def __post_init__(self):
        if self.overestimate_mode not in ("fixed_one", "inferred"):
            raise ValueError(f"unknown overestimate_mode {self.overestimate_mode!r}")
        if self.xfr_mode not in ("IFR", "CFR"):
            raise ValueError(f"unknown xfr_mode {self.xfr_mode!r}")
        if not self.use_case_likelihood and self.overestimate_mode == "inferred":
            raise ValueError("an inferred under-reporting factor requires the case likelihood")

    @property
    def include_susceptible_covariate(self) -> bool:
        # the baseline run drives Rt with mobility only; the case-informed
        # variants add the susceptible fraction as an extra covariate
        return self.use_case_likelihood

    @classmethod
    def from_name(cls, name: str, augment: str = "auto") -> "ModelVariant":
        try:
            variant = VARIANTS[name]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
        if augment == "auto":
            return variant
        if augment in ("on", "off"):
            return replace(variant, augment_last_week=augment == "on")
        raise ValueError(f"augment must be on/off/auto, got {augment!r}")


VARIANTS = {
    "base": ModelVariant("base", False, "fixed_one", "IFR", False),
    "base-ron": ModelVariant("base-ron", True, "inferred", "IFR", True),
    "base-rnn": ModelVariant("base-rnn", True, "fixed_one", "CFR", True),
    "base-ror": ModelVariant("base-ror", True, "inferred", "IFR", False),
    "base-rnr": ModelVariant("base-rnr", True, "fixed_one", "CFR", False),
}


@dataclass(frozen=True)
class ModelConfig:
    """Prior hyperparameters and structural switches shared by all variants."""

    r0_prior_mean: float = 3.28
    r0_prior_sd: float = 0.5
    alpha_prior_sd: float = 0.5
    alpha_region_scale_sd: float = 0.2
    phi_prior_scale: float = 5.0
    overestimate_prior_mean: float = 11.5
    overestimate_prior_sd: float = 2.0
    overestimate_lower: float = 1.0
    seed_scale_rate: float = 0.03
    xfr_noise_mean: float = 1.0
    xfr_noise_sd: float = 0.1
    ifr: float = 0.0076
    cfr_floor: float = 1e-4
    n_seed_days: int = 6
    death_threshold: int = 10  # cumulative deaths before likelihood terms start
    shared_phi: bool = False  # reuse the death overdispersion for cases
    infection_to_onset_mean: float = 5.1
    infection_to_onset_cv: float = 0.86
    onset_to_death_mean: float = 17.8
    onset_to_death_cv: float = 0.45
    generation_interval_mean: float = 6.5
    generation_interval_cv: float = 0.62


@dataclass(frozen=True)
class Block:
    """One contiguous group of sampled coordinates."""

    name: str
    size: int
    kind: str  # normal | std_normal | trunc_normal_log | half_normal_log | exp_log | exp_hier_log
    mu: float = 0.0
    sigma: float = 1.0
    lower: float | None = None
    rate: float = 1.0

    def log_trunc_constant(self) -> float:
        # log P(X > lower) for the untruncated normal; 0 when not truncated
        if self.kind != "trunc_normal_log" or self.lower is None:
            return 0.0
        return float(np.log(stats.norm.sf(self.lower, loc=self.mu, scale=self.sigma)))

    def reference_sd(self) -> float:
        if self.kind == "normal":
            return self.sigma
        if self.kind == "std_normal":
            return 1.0
        if self.kind == "trunc_normal_log":
            return self.sigma / self.mu  # delta method; truncation negligible here
        if self.kind == "half_normal_log":
            return SD_LOG_HALF_NORMAL
        if self.kind in ("exp_log", "exp_hier_log"):
            return SD_LOG_EXPONENTIAL
        raise ValueError(self.kind)

    def center(self) -> float:
        if self.kind in ("normal",):
            return self.mu
        if self.kind == "std_normal":
            return 0.0
        if self.kind == "trunc_normal_log":
            return math.log(self.mu)
        if self.kind == "half_normal_log":
            return math.log(self.sigma) + MEAN_LOG_HALF_NORMAL
        if self.kind == "exp_log":
            return -math.log(self.rate) - EULER_GAMMA
        if self.kind == "exp_hier_log":
            # expected log of Exp(1/tau) at the prior mean of tau
            return -math.log(self.rate) - 2.0 * EULER_GAMMA
        raise ValueError(self.kind)


@dataclass
class ParameterVector:
    """Natural-scale model parameters for one posterior draw."""

    r0: np.ndarray
    alpha_shared: np.ndarray
    alpha_region: np.ndarray  # (regions, covariates)
    sigma_alpha: float
    phi_deaths: float
    seed: np.ndarray
    seed_scale: float
    xfr_noise: np.ndarray
    overestimate: np.ndarray
    phi_cases: float | None = None
    alpha_pop_shared: float | None = None
    alpha_pop_region: np.ndarray | None = None
    sigma_alpha_pop: float | None = None

    @property
    def alpha_total(self):
        return self.alpha_region + self.alpha_shared[None, :]

    @property
    def alpha_pop_total(self):
        if self.alpha_pop_shared is None:
            return None
        return self.alpha_pop_shared + self.alpha_pop_region


class ParameterLayout:
    """Flat unconstrained coordinate layout for one (variant, shape) pair."""

    def __init__(self, variant: ModelVariant, n_regions: int, n_covariates: int, config: ModelConfig):
        self.variant = variant
        self.n_regions = n_regions
        self.n_covariates = n_covariates
        self.config = config
        m, k, c = n_regions, n_covariates, config
        blocks = [
            Block("log_R0", m, "trunc_normal_log", mu=c.r0_prior_mean, sigma=c.r0_prior_sd, lower=0.0),
            Block("alpha", k, "normal", mu=0.0, sigma=c.alpha_prior_sd),
            Block("z_alpha_region", k * m, "std_normal"),
            Block("log_sigma_alpha", 1, "half_normal_log", sigma=c.alpha_region_scale_sd),
        ]
        if variant.include_susceptible_covariate:
            blocks += [
                Block("alpha_pop", 1, "normal", mu=0.0, sigma=c.alpha_prior_sd),
                Block("z_alpha_pop", m, "std_normal"),
                Block("log_sigma_alpha_pop", 1, "half_normal_log", sigma=c.alpha_region_scale_sd),
            ]
        blocks.append(Block("log_phi_deaths", 1, "half_normal_log", sigma=c.phi_prior_scale))
        if variant.use_case_likelihood and not c.shared_phi:
            blocks.append(Block("log_phi_cases", 1, "half_normal_log", sigma=c.phi_prior_scale))
        if variant.overestimate_mode == "inferred":
            blocks.append(
                Block(
                    "log_overestimate",
                    m,
                    "trunc_normal_log",
                    mu=c.overestimate_prior_mean,
                    sigma=c.overestimate_prior_sd,
                    lower=c.overestimate_lower,
                )
            )
        blocks += [
            Block("log_seed", m, "exp_hier_log", rate=c.seed_scale_rate),
            Block("log_seed_scale", 1, "exp_log", rate=c.seed_scale_rate),
            Block("log_xfr_noise", m, "trunc_normal_log", mu=c.xfr_noise_mean, sigma=c.xfr_noise_sd, lower=0.0),
        ]
        self.blocks = blocks
        self._offsets = {}
        pos = 0
        for b in blocks:
            self._offsets[b.name] = (pos, pos + b.size)
            pos += b.size
        self.dim = pos
        self._trunc_constants = {b.name: b.log_trunc_constant() for b in blocks}

    def slice_of(self, name: str) -> slice:
        lo, hi = self._offsets[name]
        return slice(lo, hi)

    def has_block(self, name: str) -> bool:
        return name in self._offsets

    def coordinate_names(self) -> list[str]:
        names = []
        for b in self.blocks:
            if b.size == 1:
                names.append(b.name)
            else:
                names.extend(f"{b.name}[{i}]" for i in range(b.size))
        return names

    def block_values(self, theta, name: str):
        return theta[..., self.slice_of(name)]

    def unpack(self, theta, xp=np) -> ParameterVector:
        """Map an unconstrained vector to natural-scale parameters.

        Works with numpy or jax.numpy arrays (``xp`` selects the namespace),
        so the same packing logic backs both the sampler and plain evaluation.
        """
        m, k = self.n_regions, self.n_covariates
        get = lambda name: theta[..., self.slice_of(name)]
        sigma_alpha = xp.exp(get("log_sigma_alpha"))[..., 0]
        z_region = get("z_alpha_region")
        alpha_region = (
            z_region.reshape(theta.shape[:-1] + (m, k))
            * sigma_alpha[..., None, None]
        )
        pv = ParameterVector(
            r0=xp.exp(get("log_R0")),
            alpha_shared=get("alpha"),
            alpha_region=alpha_region,
            sigma_alpha=sigma_alpha,
            phi_deaths=xp.exp(get("log_phi_deaths"))[..., 0],
            seed=xp.exp(get("log_seed")),
            seed_scale=xp.exp(get("log_seed_scale"))[..., 0],
            xfr_noise=xp.exp(get("log_xfr_noise")),
            overestimate=(
                xp.exp(get("log_overestimate"))
                if self.has_block("log_overestimate")
                else xp.ones(theta.shape[:-1] + (m,))
            ),
        )
        if self.has_block("log_phi_cases"):
            pv.phi_cases = xp.exp(get("log_phi_cases"))[..., 0]
        elif self.variant.use_case_likelihood:
            pv.phi_cases = pv.phi_deaths  # shared overdispersion
        if self.variant.include_susceptible_covariate:
            sigma_pop = xp.exp(get("log_sigma_alpha_pop"))[..., 0]
            pv.alpha_pop_shared = get("alpha_pop")[..., 0]
            pv.alpha_pop_region = get("z_alpha_pop") * sigma_pop[..., None]
            pv.sigma_alpha_pop = sigma_pop
        return pv

    def log_prior(self, theta, xp=np):
        """Joint log-density of the first-fit priors on the unconstrained scale,
        including the log-transform Jacobians."""
        total = 0.0
        log_seed_scale = theta[self.slice_of("log_seed_scale")][0]
        for b in self.blocks:
            x = theta[self.slice_of(b.name)]
            if b.kind == "normal":
                total = total + xp.sum(_normal_logpdf(x, b.mu, b.sigma, xp))
            elif b.kind == "std_normal":
                total = total + xp.sum(_normal_logpdf(x, 0.0, 1.0, xp))
            elif b.kind == "trunc_normal_log":
                nat = xp.exp(x)
                total = total + xp.sum(
                    _normal_logpdf(nat, b.mu, b.sigma, xp) - self._trunc_constants[b.name] + x
                )
            elif b.kind == "half_normal_log":
                nat = xp.exp(x)
                total = total + xp.sum(
                    math.log(2.0) + _normal_logpdf(nat, 0.0, b.sigma, xp) + x
                )
            elif b.kind == "exp_log":
                nat = xp.exp(x)
                total = total + xp.sum(math.log(b.rate) - b.rate * nat + x)
            elif b.kind == "exp_hier_log":
                # seeds are exponential with mean equal to the sampled scale
                nat = xp.exp(x)
                scale = xp.exp(log_seed_scale)
                total = total + xp.sum(-log_seed_scale - nat / scale + x)
            else:
                raise ValueError(b.kind)
        return total

    def reference_sd(self) -> np.ndarray:
        out = np.empty(self.dim)
        for b in self.blocks:
            out[self.slice_of(b.name)] = b.reference_sd()
        return out

    def center(self) -> np.ndarray:
        out = np.empty(self.dim)
        for b in self.blocks:
            out[self.slice_of(b.name)] = b.center()
        return out

    def sample_unconstrained(self, rng: np.random.Generator) -> np.ndarray:
        """One draw from the first-fit priors, on the unconstrained scale."""
        out = np.empty(self.dim)
        # the seed hierarchy shares one scale draw; take it first
        seed_scale = rng.exponential(1.0 / self.config.seed_scale_rate)
        for b in self.blocks:
            sl = self.slice_of(b.name)
            if b.kind == "normal":
                out[sl] = rng.normal(b.mu, b.sigma, size=b.size)
            elif b.kind == "std_normal":
                out[sl] = rng.normal(0.0, 1.0, size=b.size)
            elif b.kind == "trunc_normal_log":
                a = (b.lower - b.mu) / b.sigma
                nat = stats.truncnorm.rvs(a, np.inf, loc=b.mu, scale=b.sigma, size=b.size, random_state=rng)
                out[sl] = np.log(nat)
            elif b.kind == "half_normal_log":
                out[sl] = np.log(np.abs(rng.normal(0.0, b.sigma, size=b.size)))
            elif b.kind == "exp_log":
                out[sl] = math.log(seed_scale)
            elif b.kind == "exp_hier_log":
                out[sl] = np.log(rng.exponential(seed_scale, size=b.size))
            else:
                raise ValueError(b.kind)
        return out


@dataclass
class Priors:
    """Priors plus chain-initialization info for one fit.

    ``mean``/``sd`` set means the priors were refit from a previous posterior:
    every unconstrained coordinate gets an independent normal prior and chains
    initialize at the means. Otherwise the first-fit priors in the layout
    apply and chains initialize from prior draws.
    """

    layout: ParameterLayout
    mean: np.ndarray | None = None
    sd: np.ndarray | None = None

    @property
    def is_updated(self) -> bool:
        return self.mean is not None

    def log_prior(self, theta, xp=np):
        if self.is_updated:
            return xp.sum(_normal_logpdf(theta, xp.asarray(self.mean), xp.asarray(self.sd), xp))
        return self.layout.log_prior(theta, xp)

    def init_point(self) -> np.ndarray:
        return np.array(self.mean if self.is_updated else self.layout.center(), dtype=np.float64)

    def chain_init(self, rng: np.random.Generator) -> np.ndarray:
        if self.is_updated:
            return np.array(self.mean, dtype=np.float64)
        draw = self.layout.sample_unconstrained(rng)
        # keep cold-start inits diffuse but not pathological
        center = self.layout.center()
        ref = self.layout.reference_sd()
        return np.clip(draw, center - 2.5 * ref, center + 2.5 * ref)

    def to_dict(self) -> dict:
        out = {
            "kind": "updated" if self.is_updated else "initial",
            "variant": self.layout.variant.name,
            "n_regions": self.layout.n_regions,
            "n_covariates": self.layout.n_covariates,
            "coordinates": self.layout.coordinate_names(),
            "unconstrained_scale": True,
        }
        if self.is_updated:
            out["mean"] = np.asarray(self.mean).tolist()
            out["sd"] = np.asarray(self.sd).tolist()
        return out

    @classmethod
    def from_dict(cls, payload: dict, layout: ParameterLayout) -> "Priors":
        if payload.get("variant") != layout.variant.name:
            raise ValueError(
                f"priors were fit for variant {payload.get('variant')!r}, not {layout.variant.name!r}"
            )
        if payload.get("n_regions") != layout.n_regions:
            raise ValueError("priors region count does not match the data")
        if payload["kind"] == "initial":
            return cls(layout)
        return cls(layout, mean=np.array(payload["mean"]), sd=np.array(payload["sd"]))


def _normal_logpdf(x, mu, sigma, xp=np):
    z = (x - mu) / sigma
    return -0.5 * z * z - xp.log(sigma) - 0.5 * math.log(2.0 * math.pi)
