"""Shared test helpers: finite differences and an independent dense energy."""

import math

import numpy as np
from scipy import linalg, stats


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------------------
# dense oracle, written with loops and scipy densities only


def rbf(a, b, ls, var):
    return var * math.exp(-0.5 * sum(((ai - bi) / l) ** 2 for ai, bi, l in zip(a, b, ls)))


def gram(A, B, ls, var):
    return np.array([[rbf(a, b, ls, var) for b in B] for a in A])


def mlp_tanh(x, weights):
    h = x
    for i, (W, b) in enumerate(weights):
        h = h @ W + b
        if i < len(weights) - 1:
            h = np.tanh(h)
    return h


def dense_sgpbae_energy(Z, Y, mask, X, weights, beta, prior_var, log_ls, log_var, S, u,
                        noise_var, box_lo, box_hi, hyper_means=(0.0, math.log(0.05)),
                        jitter=1e-6):
    """Negative log joint written directly from the Gaussian marginals.

    Kernel hyperparameters are sampled in log space, so the log-normal
    prior is pushed forward to a normal on the log values.
    """
    ls, var = np.exp(log_ls), math.exp(log_var)
    M = len(S)
    Kss = gram(S, S, ls, var)
    Kss = Kss + jitter * np.trace(Kss) / M * np.eye(M)
    Kxs = gram(X, S, ls, var)
    factor = linalg.cho_factor(Kss, lower=True)
    mu = Kxs @ linalg.cho_solve(factor, u)
    sig2 = np.array([max(var - Kxs[n] @ linalg.cho_solve(factor, Kxs[n]), 0.0)
                     for n in range(len(X))])
    latent = sum(stats.norm.logpdf(Z[n, c], mu[n, c], math.sqrt(sig2[n] + noise_var))
                 for n in range(len(X)) for c in range(Z.shape[1]))
    pred = mlp_tanh(Z, weights)
    lik = sum(stats.norm.logpdf(Y[n, p], pred[n, p], 1 / math.sqrt(beta))
              for n in range(Y.shape[0]) for p in range(Y.shape[1]) if mask[n, p])
    w_prior = sum(stats.norm.logpdf(a, 0.0, math.sqrt(prior_var)).sum()
                  for pair in weights for a in pair)
    hyper = (stats.norm.logpdf(log_ls, hyper_means[0], 1.0).sum()
             + stats.norm.logpdf(log_var, hyper_means[1], 1.0))
    u_prior = sum(stats.multivariate_normal.logpdf(u[:, c], np.zeros(M), Kss)
                  for c in range(u.shape[1]))
    box = -M * np.sum(np.log(np.asarray(box_hi) - np.asarray(box_lo)))
    return -(w_prior + hyper + u_prior + box + latent + lik)
