"""Scale-adapted stochastic-gradient HMC.

During burn-in the sampler tracks, per coordinate, a smoothed gradient
``g``, the uncentered gradient second moment ``v_hat`` and an adaptive
averaging window ``tau``.  Afterwards those are frozen and the dynamics

    v <- v - eta^2 v_hat^-1/2 grad - alpha v + N(0, 2 eta^2 alpha v_hat^-1/2 - eta^4)
    x <- x + v

are run with the resulting diagonal preconditioner.
"""

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import NonFiniteGradient

NOISE_FLOOR = 1e-16


@dataclass(frozen=True)
class SghmcConfig:
    step_size: float = 0.005
    momentum_decay: float = 0.05
    n_burn_in: int = 1500
    n_samples: int = 100
    thinning: int = 400
    noise_floor: float = NOISE_FLOOR
    window_offset: float = 1.0
    adapt_steps: int = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.momentum_decay < 1:
            raise ValueError("momentum_decay must lie in (0, 1)")
        if self.n_burn_in < 0 or self.n_samples < 0:
            raise ValueError("n_burn_in and n_samples must be non-negative")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.window_offset < 0:
            raise ValueError("window_offset must be non-negative")
        if self.adapt_steps is not None and self.adapt_steps < 1:
            raise ValueError("adapt_steps must be >= 1 when given")

    @property
    def adapt_until(self):
        """Step index at which moment adaptation stops.

        By default the whole burn-in adapts.  A shorter adaptation phase
        freezes the preconditioner early; the remaining burn-in steps are
        still discarded.
        """
        if self.adapt_steps is None:
            return self.n_burn_in
        return min(self.adapt_steps, self.n_burn_in)

    @property
    def total_steps(self):
        return self.n_burn_in + self.n_samples * self.thinning


@dataclass
class SamplerState:
    position: np.ndarray
    velocity: np.ndarray
    v_hat: np.ndarray
    g: np.ndarray
    tau: np.ndarray
    step_count: int = 0
    in_burn_in: bool = True

    @classmethod
    def init(cls, position):
        position = np.array(position, dtype=np.float64)
        n = position.shape
        return cls(position, np.zeros(n), np.ones(n), np.zeros(n), np.ones(n))

    def __post_init__(self):
        shapes = {a.shape for a in (self.position, self.velocity, self.v_hat, self.g, self.tau)}
        if len(shapes) != 1:
            raise ValueError(f"sampler vectors disagree in shape: {shapes}")


def adapt_moments(state, grad, noise_floor=NOISE_FLOOR, window_offset=1.0):
    """One burn-in update of ``v_hat``, ``tau`` and ``g``.

    All three increments read the pre-update values.  The moving averages
    use weight ``1 / (tau + window_offset)``.  With ``window_offset=0`` a
    window of one step reproduces the current gradient exactly, so
    ``g**2 / v_hat == 1`` and ``tau`` never grows past one; ``v_hat`` then
    just tracks the last squared gradient.  The default offset of one keeps
    half of the old estimate at every step.
    """
    if not state.in_burn_in:
        raise RuntimeError("moment adaptation is only allowed during burn-in")
    v_hat, g, tau = state.v_hat, state.g, state.tau
    inv_tau = 1.0 / (tau + window_offset)
    new_v = np.maximum(v_hat - inv_tau * v_hat + inv_tau * grad * grad, noise_floor)
    # the window never shrinks below one step
    new_tau = np.maximum(tau - g * g / v_hat * tau + 1.0, 1.0)
    new_g = g - inv_tau * g + inv_tau * grad
    return replace(state, v_hat=new_v, tau=new_tau, g=new_g)


def noise_variance(state, config):
    eta, alpha = config.step_size, config.momentum_decay
    var = 2.0 * eta**2 * alpha / np.sqrt(state.v_hat) - eta**4
    return np.maximum(var, config.noise_floor)


def sghmc_step(state, grad_fn, rng, config, inject_noise=True):
    """Advance one step; adapts moments first while in burn-in."""
    grad = np.asarray(grad_fn(state.position), dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise NonFiniteGradient(
            f"non-finite gradient at step {state.step_count} "
            f"({bad.size} coordinates, first index {bad[0]})")
    if state.in_burn_in:
        state = adapt_moments(state, grad, config.noise_floor, config.window_offset)
    eta, alpha = config.step_size, config.momentum_decay
    v = state.velocity - eta**2 * grad / np.sqrt(state.v_hat) - alpha * state.velocity
    if inject_noise:
        var = noise_variance(state, config)
        assert np.all(var >= 0)
        v = v + np.sqrt(var) * rng.standard_normal(v.shape)
    return replace(state, position=state.position + v, velocity=v,
                   step_count=state.step_count + 1)


def run_chain(init, grad_fn, config, rng, callback=None, state=None):
    """Burn in, then collect ``n_samples`` positions ``thinning`` steps apart.

    ``callback(index, state)`` is invoked for each collected sample.  Pass a
    :class:`SamplerState` as ``state`` to resume; the final state is
    available as ``run_chain.last_state`` on the returned list.
    """
    if state is None:
        state = SamplerState.init(init)
    for k in range(config.n_burn_in):
        if k == config.adapt_until:
            state = replace(state, in_burn_in=False)
        state = sghmc_step(state, grad_fn, rng, config)
    state = replace(state, in_burn_in=False)
    samples = ChainSamples()
    for i in range(config.n_samples):
        for _ in range(config.thinning):
            state = sghmc_step(state, grad_fn, rng, config)
        samples.append(state.position.copy())
        if callback is not None:
            callback(i, state)
    samples.last_state = state
    return samples


class ChainSamples(list):
    """List of position snapshots that also remembers the final state."""

    last_state = None


def save_trace_csv(snapshots, path):
    """One row per collected sample: ``sample,x0,x1,...``."""
    snapshots = np.atleast_2d(np.asarray(snapshots, dtype=np.float64))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample"] + [f"x{j}" for j in range(snapshots.shape[1])])
        for i, row in enumerate(snapshots):
            w.writerow([i] + [repr(float(v)) for v in row])


def load_trace_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
