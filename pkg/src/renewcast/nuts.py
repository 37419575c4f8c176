"""Dynamic Hamiltonian Monte Carlo with no-U-turn termination.

Single-chain sampler over a generic ``value_and_grad`` callable. Warmup runs
dual-averaging step-size adaptation toward a target acceptance statistic and
re-estimates a diagonal mass matrix over a sequence of doubling windows; the
trajectory tree stops doubling at a configurable depth. A state whose log
density or gradient is non-finite is treated as an infinitely bad leapfrog
step, so the trajectory terminates there and the sample counts a divergence.

Everything is driven by one ``numpy.random.Generator``, so a chain is a pure
function of (callable, initial point, config, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_ENERGY_ERROR = 1000.0  # leaf divergence threshold on the Hamiltonian
_FIND_EPS_MAX_STEPS = 100


class FitFailure(RuntimeError):
    """Raised when warmup cannot produce usable draws (e.g. every iteration
    diverged); carries whatever partial state is useful for post-mortems."""

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = details or {}


@dataclass
class ChainResult:
    draws: np.ndarray  # (samples, dim)
    divergent: np.ndarray  # (samples,) bool
    accept_stat: np.ndarray  # (samples,)
    tree_depth: np.ndarray  # (samples,)
    step_size: float
    inv_mass: np.ndarray
    warmup_divergences: int = 0


@dataclass
class _State:
    q: np.ndarray
    logp: float
    grad: np.ndarray


def _leapfrog(vag, q, p, grad, eps, inv_mass):
    p_half = p + 0.5 * eps * grad
    q_new = q + eps * inv_mass * p_half
    logp_new, grad_new = vag(q_new)
    if not (np.isfinite(logp_new) and np.isfinite(grad_new).all()):
        return q_new, p_half, -np.inf, np.zeros_like(grad)
    p_new = p_half + 0.5 * eps * grad_new
    return q_new, p_new, logp_new, grad_new


def _kinetic(p, inv_mass):
    return 0.5 * float(np.dot(p * p, inv_mass))


def _sample_momentum(rng, inv_mass):
    return rng.standard_normal(inv_mass.size) / np.sqrt(inv_mass)


def find_reasonable_step_size(vag, state: _State, inv_mass, rng) -> float:
    """Double/halve the step size until one leapfrog step has acceptance
    probability on the near side of one half."""
    eps = 1.0
    p = _sample_momentum(rng, inv_mass)
    h0 = state.logp - _kinetic(p, inv_mass)
    _, p1, logp1, _ = _leapfrog(vag, state.q, p, state.grad, eps, inv_mass)
    log_ratio = (logp1 - _kinetic(p1, inv_mass)) - h0
    direction = 1.0 if log_ratio > math.log(0.5) else -1.0
    for _ in range(_FIND_EPS_MAX_STEPS):
        if direction * log_ratio <= direction * math.log(0.5):
            break
        eps *= 2.0**direction
        _, p1, logp1, _ = _leapfrog(vag, state.q, p, state.grad, eps, inv_mass)
        log_ratio = (logp1 - _kinetic(p1, inv_mass)) - h0
    return max(eps, 1e-10)


class _DualAveraging:
    """Nesterov dual averaging of the log step size."""

    def __init__(self, eps0: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.h_bar = 0.0
        self.log_eps_bar = math.log(eps0)
        self.count = 0
        self.log_eps = math.log(eps0)

    def update(self, accept_stat: float) -> float:
        self.count += 1
        m = self.count
        frac = 1.0 / (m + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - math.sqrt(m) / self.gamma * self.h_bar
        w = m**-self.kappa
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def adapted(self) -> float:
        return math.exp(self.log_eps_bar)


@dataclass
class _Tree:
    minus: tuple  # (q, p, grad) at the backward end
    plus: tuple  # (q, p, grad) at the forward end
    proposal: _State
    n_slice: int
    keep_going: bool
    sum_accept: float
    n_leaves: int
    divergent: bool = False


def _no_uturn(tree: _Tree, inv_mass) -> bool:
    dq = tree.plus[0] - tree.minus[0]
    return (
        np.dot(dq, inv_mass * tree.minus[1]) >= 0.0
        and np.dot(dq, inv_mass * tree.plus[1]) >= 0.0
    )


def _build_tree(vag, q, p, grad, log_u, direction, depth, eps, h0, inv_mass, rng) -> _Tree:
    if depth == 0:
        q1, p1, logp1, grad1 = _leapfrog(vag, q, p, grad, direction * eps, inv_mass)
        h1 = logp1 - _kinetic(p1, inv_mass) if np.isfinite(logp1) else -np.inf
        n_slice = int(log_u <= h1)
        diverged = not (h1 > log_u - MAX_ENERGY_ERROR)
        accept = min(1.0, math.exp(min(h1 - h0, 0.0))) if np.isfinite(h1) else 0.0
        edge = (q1, p1, grad1)
        return _Tree(edge, edge, _State(q1, logp1, grad1), n_slice, not diverged, accept, 1, diverged)

    inner = _build_tree(vag, q, p, grad, log_u, direction, depth - 1, eps, h0, inv_mass, rng)
    if not inner.keep_going:
        return inner
    if direction == -1:
        outer = _build_tree(vag, *inner.minus, log_u, direction, depth - 1, eps, h0, inv_mass, rng)
        merged = _Tree(outer.minus, inner.plus, inner.proposal, 0, True, 0.0, 0)
    else:
        outer = _build_tree(vag, *inner.plus, log_u, direction, depth - 1, eps, h0, inv_mass, rng)
        merged = _Tree(inner.minus, outer.plus, inner.proposal, 0, True, 0.0, 0)
    total = inner.n_slice + outer.n_slice
    if outer.n_slice > 0 and rng.random() < outer.n_slice / max(total, 1):
        merged.proposal = outer.proposal
    merged.n_slice = total
    merged.sum_accept = inner.sum_accept + outer.sum_accept
    merged.n_leaves = inner.n_leaves + outer.n_leaves
    merged.divergent = inner.divergent or outer.divergent
    merged.keep_going = outer.keep_going and _no_uturn(merged, inv_mass)
    return merged


def _transition(vag, state: _State, eps, inv_mass, max_depth, rng):
    """One no-U-turn update; returns (state, accept_stat, depth, divergent)."""
    p0 = _sample_momentum(rng, inv_mass)
    h0 = state.logp - _kinetic(p0, inv_mass)
    log_u = h0 + math.log(rng.random())
    backward = (state.q, p0, state.grad)
    forward = (state.q, p0, state.grad)
    current = state
    n_slice = 1
    depth = 0
    sum_accept = 0.0
    n_leaves = 0
    divergent = False
    while depth < max_depth:
        direction = -1 if rng.random() < 0.5 else 1
        if direction == -1:
            subtree = _build_tree(vag, *backward, log_u, direction, depth, eps, h0, inv_mass, rng)
            backward = subtree.minus
        else:
            subtree = _build_tree(vag, *forward, log_u, direction, depth, eps, h0, inv_mass, rng)
            forward = subtree.plus
        sum_accept += subtree.sum_accept
        n_leaves += subtree.n_leaves
        divergent = divergent or subtree.divergent
        if subtree.keep_going and subtree.n_slice > 0:
            if rng.random() < subtree.n_slice / n_slice:
                current = subtree.proposal
        n_slice += subtree.n_slice
        depth += 1
        if not subtree.keep_going:
            break
        whole = _Tree(backward, forward, current, n_slice, True, 0.0, 0)
        if not _no_uturn(whole, inv_mass):
            break
    accept_stat = sum_accept / max(n_leaves, 1)
    return current, accept_stat, depth, divergent


def _mass_window_ends(n_warmup: int, init_buffer=75, term_buffer=50, base_window=25):
    """Start of the slow phase and the (1-based) iteration indices at which the
    mass matrix is re-estimated, following the usual fast/slow/fast split."""
    if n_warmup < 20:
        return n_warmup, []
    if init_buffer + base_window + term_buffer > n_warmup:
        init_buffer = max(1, int(0.15 * n_warmup))
        term_buffer = max(1, int(0.10 * n_warmup))
        base_window = n_warmup - init_buffer - term_buffer
    ends = []
    start = init_buffer
    size = base_window
    while True:
        end = start + size
        if end + 2 * size > n_warmup - term_buffer:
            ends.append(n_warmup - term_buffer)
            break
        ends.append(end)
        start = end
        size *= 2
    return init_buffer, ends


def _regularized_variance(draws: list[np.ndarray], dim: int) -> np.ndarray:
    n = len(draws)
    if n < 2:
        return np.ones(dim)
    var = np.var(np.asarray(draws), axis=0, ddof=1)
    var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
    return np.maximum(var, 1e-10)


def run_chain(
    value_and_grad,
    q0: np.ndarray,
    n_warmup: int,
    n_samples: int,
    rng: np.random.Generator,
    max_tree_depth: int = 8,
    target_accept: float = 0.8,
) -> ChainResult:
    """Run warmup adaptation followed by ``n_samples`` posterior draws."""
    q0 = np.asarray(q0, dtype=np.float64)
    dim = q0.size
    logp0, grad0 = value_and_grad(q0)
    if not (np.isfinite(logp0) and np.isfinite(grad0).all()):
        raise FitFailure("log density is not finite at the chain's initial point")
    state = _State(q0, logp0, np.asarray(grad0))
    inv_mass = np.ones(dim)

    warmup_div = 0
    if n_warmup > 0:
        eps = find_reasonable_step_size(value_and_grad, state, inv_mass, rng)
        adapter = _DualAveraging(eps, target_accept)
        window_ends = _mass_window_ends(n_warmup)
        first_window_start = window_ends[0] and 0  # placeholder, replaced below
        slow_start = _mass_window_ends(n_warmup)[0] if window_ends else n_warmup
        # draws collected since the last mass update, used for the next estimate
        window_draws: list[np.ndarray] = []
        next_end = 0
        for m in range(1, n_warmup + 1):
            state, accept_stat, _, div = _transition(
                value_and_grad, state, eps, inv_mass, max_tree_depth, rng
            )
            warmup_div += int(div)
            eps = adapter.update(accept_stat)
            window_draws.append(state.q)
            if window_ends and m == window_ends[next_end]:
                inv_mass = _regularized_variance(window_draws, dim)
                window_draws = []
                eps = find_reasonable_step_size(value_and_grad, state, inv_mass, rng)
                adapter = _DualAveraging(eps, target_accept)
                next_end += 1
                if next_end >= len(window_ends):
                    window_ends = []
        eps = adapter.adapted()
        if warmup_div == n_warmup:
            raise FitFailure(
                "every warmup iteration diverged",
                {"warmup_divergences": warmup_div, "step_size": eps},
            )
    else:
        eps = find_reasonable_step_size(value_and_grad, state, inv_mass, rng)

    draws = np.empty((n_samples, dim))
    divergent = np.zeros(n_samples, dtype=bool)
    accept = np.empty(n_samples)
    depth_out = np.empty(n_samples, dtype=np.int64)
    for i in range(n_samples):
        state, accept_stat, depth, div = _transition(
            value_and_grad, state, eps, inv_mass, max_tree_depth, rng
        )
        draws[i] = state.q
        divergent[i] = div
        accept[i] = accept_stat
        depth_out[i] = depth
    return ChainResult(
        draws=draws,
        divergent=divergent,
        accept_stat=accept,
        tree_depth=depth_out,
        step_size=eps,
        inv_mass=inv_mass,
        warmup_divergences=warmup_div,
    )
