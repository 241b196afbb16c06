"""Covariance functions and log-normal hyperpriors for the latent GP.

Every kernel is written once against the expression graph; the plain
numpy entry points build a throwaway graph of constants.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import DimensionMismatch

KINDS = ("rbf_ard", "periodic_1d")


@dataclass(frozen=True)
class KernelKind:
    tag: str = "rbf_ard"
    period: float = 2.0 * math.pi

    def __post_init__(self):
        if self.tag not in KINDS:
            raise ValueError(f"unknown kernel kind {self.tag!r}")
        if self.tag == "periodic_1d" and not self.period > 0:
            raise ValueError("period must be positive")


@dataclass
class KernelParams:
    """Log-domain lengthscales (one per input dimension) and variance."""

    log_lengthscales: np.ndarray
    log_variance: float

    def __post_init__(self):
        self.log_lengthscales = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=np.float64))
        self.log_variance = float(self.log_variance)

    @property
    def dim(self):
        return self.log_lengthscales.shape[0]

    @property
    def lengthscales(self):
        return np.exp(self.log_lengthscales)

    @property
    def variance(self):
        return math.exp(self.log_variance)

    @classmethod
    def init(cls, dim, lengthscale=1.0, variance=0.05):
        return cls(np.full(dim, math.log(lengthscale)), math.log(variance))


@dataclass(frozen=True)
class LogNormalPrior:
    mean_log: float
    var_log: float = 1.0

    def __post_init__(self):
        if not self.var_log > 0:
            raise ValueError("var_log must be positive")


@dataclass(frozen=True)
class HyperPriors:
    lengthscale: LogNormalPrior = field(default_factory=lambda: LogNormalPrior(0.0, 1.0))
    variance: LogNormalPrior = field(
        default_factory=lambda: LogNormalPrior(math.log(0.05), 1.0))


def _check_dims(kind, d, A, B):
    for name, M in (("A", A), ("B", B)):
        if M.ndim != 2 or M.shape[1] != d:
            raise DimensionMismatch(f"{name} has shape {M.shape}, expected (*, {d})")
    if kind.tag == "periodic_1d" and d != 1:
        raise DimensionMismatch("periodic_1d needs one input dimension")


def kernel_matrix_node(kind, log_ls, log_var, A, B):
    """Kernel matrix between the rows of ``A`` and ``B`` as a graph node.

    ``log_ls`` (shape (D,)) and ``log_var`` (shape ()) may be parameters or
    constants; ``A`` and ``B`` are (n, D) / (m, D) nodes or arrays.
    """
    g = nx._graph_of(log_ls, log_var, A, B)
    log_ls, log_var, A, B = (g.lift(v) for v in (log_ls, log_var, A, B))
    d = log_ls.shape[0]
    _check_dims(kind, d, A.value, B.value)
    n, m = A.shape[0], B.shape[0]
    diff = nx.reshape(A, (n, 1, d)) - nx.reshape(B, (1, m, d))
    if kind.tag == "rbf_ard":
        inv_ls = nx.exp(-log_ls)
        scaled = diff * inv_ls
        r2 = nx.sum_(nx.square(scaled), axis=2)
        return nx.exp(log_var - 0.5 * r2)
    s = nx.sin(nx.reshape(diff, (n, m)) * (math.pi / kind.period))
    inv_ls2 = nx.exp(-2.0 * log_ls)
    return nx.exp(log_var - 2.0 * nx.square(s) * inv_ls2)


def kernel_diag_node(kind, log_var, n):
    """``kappa(x, x)`` for n points; stationary kernels give the variance."""
    g = nx._graph_of(log_var)
    return nx.broadcast(nx.exp(g.lift(log_var)), (n,))


def kernel_matrix(kind, params, A, B):
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.asarray(B, dtype=np.float64)
    if B.ndim == 1:
        B = B.reshape(-1, params.dim) if B.size else np.zeros((0, params.dim))
    g = nx.ExprGraph()
    return kernel_matrix_node(kind, params.log_lengthscales, params.log_variance, g.const(A), B).value


def kernel_eval(kind, params, x, x2):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x2 = np.atleast_1d(np.asarray(x2, dtype=np.float64))
    if x.shape != (params.dim,) or x2.shape != (params.dim,):
        raise DimensionMismatch(f"inputs {x.shape}, {x2.shape} vs dimension {params.dim}")
    return float(kernel_matrix(kind, params, x[None, :], x2[None, :])[0, 0])


def lognormal_logpdf_node(value_log, prior):
    """Log-normal density evaluated at ``exp(value_log)``, summed.

    That is the Normal log-density of the log-domain value minus the
    log-value itself.
    """
    v = value_log
    r = v - prior.mean_log
    n = v.value.size
    return (nx.sum_(nx.square(r)) * (-0.5 / prior.var_log)
            - 0.5 * n * math.log(2.0 * math.pi * prior.var_log) - nx.sum_(v))


def log_prior_hyper_node(log_ls, log_var, priors):
    g = nx._graph_of(log_ls, log_var)
    return (lognormal_logpdf_node(g.lift(log_ls), priors.lengthscale)
            + lognormal_logpdf_node(g.lift(log_var), priors.variance))


def log_prior_hyper(params, priors=None):
    priors = priors or HyperPriors()
    g = nx.ExprGraph()
    node = log_prior_hyper_node(g.const(params.log_lengthscales),
                                g.const(params.log_variance), priors)
    return float(node.value)


def log_jacobian_node(log_ls, log_var):
    """``log |d theta / d log theta|`` for sampling in the log domain."""
    g = nx._graph_of(log_ls, log_var)
    return nx.sum_(g.lift(log_ls)) + g.lift(log_var)
