"""Desk-scale experiment drivers shared by the CLI and the acceptance suite."""

from dataclasses import dataclass, replace

import numpy as np

from . import autoencoder as ae
from .datasets import MovingBallConfig, generate_correlated_gp, generate_moving_ball
from .diagnostics import mean_imputer, metrics, rhat
from .sghmc import SghmcConfig


def moving_ball_model(kind="sgp-bae", n_inducing=10, hidden=64, batch_size=None):
    return ae.ModelConfig(kind=kind, latent_dim=2, encoder_hidden=(hidden,),
                          decoder_hidden=(hidden,), activation="tanh", n_inducing=n_inducing,
                          beta=100.0, noise_var=0.01, batch_size=batch_size)


# The preconditioner adapts only over the first 300 burn-in steps.  Adapting
# for longer lets the chain settle on the flat short-lengthscale plateau, where
# vanishing gradients shrink v_hat and inflate the injected noise.
MOVING_BALL_SGHMC = SghmcConfig(step_size=0.01, momentum_decay=0.05, n_burn_in=1500,
                                n_samples=30, thinning=50, adapt_steps=300)

# Multi-chain convergence checks need longer, more widely spaced chains.
CONVERGENCE_SGHMC = replace(MOVING_BALL_SGHMC, n_samples=60, thinning=100)


def encoder_latents(encoder, Y, rng, n_draws=10):
    """Encoder output averaged over seed draws."""
    zs = [ae.encode(encoder, Y, rng.standard_normal((Y.shape[0], encoder.seed_dim)))
          for _ in range(n_draws)]
    return np.mean(zs, axis=0)


def fit_affine(Z, T):
    """Least-squares map ``[Z, 1] @ A ~= T``."""
    F = np.hstack([Z, np.ones((len(Z), 1))])
    A, *_ = np.linalg.lstsq(F, T, rcond=None)
    return A


def apply_affine(A, Z):
    return np.hstack([Z, np.ones((len(Z), 1))]) @ A


def trajectory_rmse(result, train, train_traj, test, test_traj, rng):
    """Mean over test videos of the per-video RMSE in pixels.

    Latents are mapped to pixel positions by one affine map fitted on the
    training videos.
    """
    A = fit_affine(encoder_latents(result.encoder, train.Y, rng), train_traj.reshape(-1, 2))
    pred = apply_affine(A, encoder_latents(result.encoder, test.Y, rng))
    err = (pred - test_traj.reshape(-1, 2)).reshape(test_traj.shape)
    return float(np.mean(np.sqrt(np.mean(err**2, axis=(1, 2)))))


@dataclass
class BallComparison:
    seed: int
    rmse: dict


def moving_ball_comparison(seed, n_videos=10, kinds=("bae", "sgp-bae"), sghmc=None,
                           hidden=64):
    """Train each model kind on the same videos; report test trajectory RMSE."""
    sghmc = sghmc or MOVING_BALL_SGHMC
    train, train_traj = generate_moving_ball(MovingBallConfig(n_videos=n_videos, seed=2 * seed))
    test, test_traj = generate_moving_ball(MovingBallConfig(n_videos=n_videos, seed=2 * seed + 1))
    out = {}
    for kind in kinds:
        rng = np.random.default_rng(1000 + seed)
        res = ae.train(train, moving_ball_model(kind, hidden=hidden), sghmc, rng)
        out[kind] = trajectory_rmse(res, train, train_traj, test, test_traj,
                                    np.random.default_rng(seed))
    return BallComparison(seed, out)


def lengthscale_posterior(result):
    """Mean and std of the first-layer lengthscale over posterior samples."""
    ls = np.array([np.exp(s.values["gp0.log_ls"][0]) for s in result.samples])
    return float(ls.mean()), float(ls.std())


def lengthscale_study(seed=0, inducing=(5, 20), n_videos=10, sghmc=None, hidden=64):
    sghmc = sghmc or MOVING_BALL_SGHMC
    data, _ = generate_moving_ball(MovingBallConfig(n_videos=n_videos, seed=seed))
    out = {}
    for M in inducing:
        res = ae.train(data, moving_ball_model("sgp-bae", n_inducing=M, hidden=hidden), sghmc,
                       np.random.default_rng(seed + 17))
        out[M] = lengthscale_posterior(res)
    return out


def predictive_chains(results, Y, seed=0):
    """Decoded predictive draws per chain, shape (chains, samples, N * P).

    All chains share the seed stream so differences come from the chains.
    """
    chains = []
    for res in results:
        outs = ae.predictive_outputs(res.model, res.samples, res.encoder, Y,
                                     np.random.default_rng(seed))
        chains.append(outs.reshape(len(res.samples), -1))
    return np.stack(chains)


def median_rhat(chains, min_sd=1e-8):
    """Median R-hat over dimensions whose pooled spread is not negligible."""
    flat = chains.reshape(chains.shape[0], chains.shape[1], -1)
    keep = flat.std(axis=(0, 1)) > min_sd
    return float(np.median(rhat(flat[:, :, keep])))


def imputation_study(seed=0, n=200, sghmc=None, model=None):
    """Correlated two-output GP with 30% missing; SGP-BAE versus the mean imputer."""
    data, truth = generate_correlated_gp(n=n, missing_frac=0.3, correlation=0.9, seed=seed)
    model = model or ae.ModelConfig(kind="sgp-bae", latent_dim=2, encoder_hidden=(32,),
                                    decoder_hidden=(32,), n_inducing=20, beta=5.0,
                                    batch_size=None)
    sghmc = sghmc or SghmcConfig(step_size=0.01, n_burn_in=2000, n_samples=50, thinning=20)
    res = ae.train(data, model, sghmc, np.random.default_rng(seed + 1))
    imp = ae.impute(res.model, res.samples, data, res.encoder, np.random.default_rng(seed + 2))
    ours = metrics(imp.mean, imp.std**2, truth, imp.missing)
    mu, var = mean_imputer(data.Y, data.mask)
    base = metrics(mu, var, truth, imp.missing)
    return ours, base


def with_schedule(cfg, **kw):
    return replace(cfg, **kw)
