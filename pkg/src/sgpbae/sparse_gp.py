"""FITC sparse-GP prior terms, the dense-GP reference, and deep-GP stacks.

Inducing variables are stored as an ``(M, G * C)`` matrix: column block
``g`` holds the ``C`` channels of group ``g``.  Groups are independent GP
instances that share the kernel and the inducing inputs (for example one
instance per video).  With a single group this is the usual ``(M, C)``.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.cluster.vq import kmeans2

from . import numerics as nx
from .errors import TooLarge
from .kernels import KernelKind, KernelParams, kernel_diag_node, kernel_matrix_node

DENSE_LIMIT = 5000


@dataclass
class InducingSet:
    S: np.ndarray
    u: np.ndarray
    n_groups: int = 1

    def __post_init__(self):
        self.S = np.atleast_2d(np.asarray(self.S, dtype=np.float64))
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim == 1:
            self.u = self.u[:, None]
        if self.S.shape[0] < 1 or self.u.shape[0] != self.S.shape[0]:
            raise ValueError(f"S {self.S.shape} and u {self.u.shape} disagree")
        if self.u.shape[1] % self.n_groups:
            raise ValueError("u columns must split evenly across groups")

    @property
    def M(self):
        return self.S.shape[0]

    @property
    def n_channels(self):
        return self.u.shape[1] // self.n_groups


@dataclass
class SparseGPPrior:
    kind: KernelKind
    params: KernelParams
    inducing: InducingSet
    noise_var: float = 0.01
    box_lo: np.ndarray = None
    box_hi: np.ndarray = None

    def __post_init__(self):
        if not self.noise_var >= 0:
            raise ValueError("noise_var must be non-negative")
        d = self.inducing.S.shape[1]
        if self.box_lo is None:
            self.box_lo = np.full(d, -np.inf)
        if self.box_hi is None:
            self.box_hi = np.full(d, np.inf)
        self.box_lo = np.broadcast_to(np.asarray(self.box_lo, dtype=np.float64), (d,)).copy()
        self.box_hi = np.broadcast_to(np.asarray(self.box_hi, dtype=np.float64), (d,)).copy()

    @property
    def n_channels(self):
        return self.inducing.n_channels

    @property
    def n_groups(self):
        return self.inducing.n_groups


@dataclass
class DeepGPPrior:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.inducing.S.shape[1] != lower.n_channels:
                raise ValueError("deep GP layer widths do not chain")

    @property
    def L(self):
        return len(self.layers)

    @property
    def n_channels(self):
        return self.layers[-1].n_channels


def inducing_box(X, pad=0.05):
    """Empirical bounding box of ``X`` widened by ``pad`` of its span per side."""
    X = np.atleast_2d(X)
    lo, hi = X.min(axis=0), X.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return lo - pad * span, hi + pad * span


def init_inducing_inputs(X, M, rng):
    """k-means centres of ``X`` (distinct rows, sorted along the first axis)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    uniq = np.unique(X, axis=0)
    if len(uniq) <= M:
        lo, hi = inducing_box(X, pad=0.0)
        S = lo + (hi - lo) * np.linspace(0, 1, M)[:, None]
    else:
        seed = int(rng.integers(2**31))
        S, _ = kmeans2(X, M, seed=seed, minit="++")
    S = S[np.argsort(S[:, 0], kind="stable")]
    # nudge exact duplicates apart so K_SS stays factorizable
    for i in range(1, M):
        if np.allclose(S[i], S[i - 1]):
            S[i] = S[i] + 1e-3 * (i + 1)
    return S


# ---------------------------------------------------------------------------
# graph-level building blocks


def group_indicator(groups, n_groups, n_channels):
    """Constant (b, G*C) mask selecting each row's column block."""
    groups = np.asarray(groups, dtype=int)
    mask = np.zeros((groups.shape[0], n_groups * n_channels))
    for c in range(n_channels):
        mask[np.arange(groups.shape[0]), groups * n_channels + c] = 1.0
    return mask


def select_groups(F_all, groups, n_groups, n_channels):
    """Pick each row's own group block out of a (b, G*C) node."""
    if n_groups == 1:
        return F_all
    mask = group_indicator(groups, n_groups, n_channels)
    fold = np.tile(np.eye(n_channels), (n_groups, 1))
    return nx.matmul(F_all * mask, fold)


@dataclass
class FitcTerms:
    L: nx.Node
    Ksx_solved: nx.Node
    u_solved: nx.Node
    mean: nx.Node
    var: nx.Node


def fitc_terms(kind, log_ls, log_var, S, u, x, groups=None, n_groups=1):
    """FITC conditional moments of f at ``x`` as graph nodes.

    Returns the mean (b, C), the marginal variance (b,), and the Cholesky
    intermediates reused by the inducing-variable prior.
    """
    g = nx._graph_of(log_ls, log_var, S, u, x)
    x = g.lift(x)
    u = g.lift(u)
    b = x.shape[0]
    n_channels = u.shape[1] // n_groups
    Kss = kernel_matrix_node(kind, log_ls, log_var, S, S)
    L = nx.jittered_cholesky_node(Kss)
    Ksx = kernel_matrix_node(kind, log_ls, log_var, S, x)
    A = nx.solve_triangular(L, Ksx)
    beta = nx.solve_triangular(L, u)
    mean_all = nx.matmul(nx.transpose(A), beta)
    if groups is None:
        groups = np.zeros(b, dtype=int)
    mean = select_groups(mean_all, groups, n_groups, n_channels)
    var = nx.relu(kernel_diag_node(kind, log_var, b) - nx.sum_(nx.square(A), axis=0))
    return FitcTerms(L, A, beta, mean, var)


def latent_marginal_logpdf_node(z, mean, var, noise_var):
    """sum_n sum_c log N(z_nc; mean_nc, var_n + noise_var)."""
    return nx.gaussian_logpdf(z, mean, nx.reshape(var, (var.shape[0], 1)) + noise_var)


def log_prior_inducing_node(terms, S_value, box_lo, box_hi):
    """log N(u; 0, K_SS) over all columns plus the uniform box density on S."""
    beta = terms.u_solved
    M, ncol = beta.shape
    if np.any(S_value < box_lo) or np.any(S_value > box_hi):
        return beta.graph.const(-np.inf)
    box = 0.0
    width = box_hi - box_lo
    if np.all(np.isfinite(width)):
        box = -M * float(np.sum(np.log(width)))
    logdet_half = nx.sum_(nx.log(nx.diag(terms.L)))
    return (nx.sum_(nx.square(beta)) * -0.5 - logdet_half * ncol
            - 0.5 * M * ncol * nx.LOG_2PI + box)


def dense_gp_log_prior_node(Z, X, kind, log_ls, log_var, noise_var=0.0, groups=None):
    """Exact GP log-density of the columns of ``Z`` (block-diagonal over groups)."""
    g = nx._graph_of(Z, X, log_ls, log_var)
    Z = g.lift(Z)
    Xv = X.value if isinstance(X, nx.Node) else np.asarray(X, dtype=np.float64)
    N, C = Z.shape
    if N > DENSE_LIMIT:
        raise TooLarge(f"dense GP prior limited to {DENSE_LIMIT} points, got {N}")
    if groups is None:
        groups = np.zeros(N, dtype=int)
    groups = np.asarray(groups)
    total = None
    for grp in np.unique(groups):
        idx = np.flatnonzero(groups == grp)
        if len(idx) == N:
            Zg, Xg = Z, Xv
        else:
            sel = np.zeros((len(idx), N))
            sel[np.arange(len(idx)), idx] = 1.0
            Zg, Xg = nx.matmul(sel, Z), Xv[idx]
        K = kernel_matrix_node(kind, log_ls, log_var, Xg, Xg)
        if noise_var:
            K = K + noise_var * np.eye(len(idx))
        L = nx.jittered_cholesky_node(K)
        alpha = nx.solve_triangular(L, Zg)
        term = (nx.sum_(nx.square(alpha)) * -0.5
                - nx.sum_(nx.log(nx.diag(L))) * C - 0.5 * len(idx) * C * nx.LOG_2PI)
        total = term if total is None else total + term
    return total


@dataclass
class GPLayerNodes:
    """Graph handles for one sparse-GP layer."""

    log_ls: nx.Node
    log_var: nx.Node
    S: nx.Node
    u: nx.Node


def layer_nodes(graph, prior, as_param=True, prefix=""):
    make = graph.param if as_param else graph.const
    return GPLayerNodes(
        make(prior.params.log_lengthscales, prefix + "log_lengthscales"),
        make(prior.params.log_variance, prefix + "log_variance"),
        make(prior.inducing.S, prefix + "S"),
        make(prior.inducing.u, prefix + "u"),
    )


def deep_propagate_nodes(priors, nodes, x, eps, groups=None):
    """Sample through hidden layers, return last-layer FITC terms and all terms.

    ``eps`` holds one standard-normal (b, width_l) array per hidden layer.
    """
    h = x
    all_terms = []
    for l, (prior, nd) in enumerate(zip(priors, nodes)):
        t = fitc_terms(prior.kind, nd.log_ls, nd.log_var, nd.S, nd.u, h,
                       groups=groups, n_groups=prior.n_groups)
        all_terms.append(t)
        if l < len(priors) - 1:
            sd = nx.sqrt(t.var)
            h = t.mean + nx.reshape(sd, (sd.shape[0], 1)) * eps[l]
    return all_terms[-1], all_terms


# ---------------------------------------------------------------------------
# numpy entry points


def _groups_or_zero(groups, b):
    return np.zeros(b, dtype=int) if groups is None else np.asarray(groups, dtype=int)


def fitc_moments(prior, x, groups=None):
    """FITC mean ``(b, C)`` and variance ``(b,)`` of the latent function at ``x``."""
    g = nx.ExprGraph()
    nd = layer_nodes(g, prior, as_param=False)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = fitc_terms(prior.kind, nd.log_ls, nd.log_var, nd.S, nd.u, x,
                   groups=_groups_or_zero(groups, x.shape[0]), n_groups=prior.n_groups)
    return t.mean.value, t.var.value


def latent_marginal_logpdf(z, mean, var, noise_var):
    g = nx.ExprGraph()
    z = g.const(np.atleast_2d(z))
    return float(latent_marginal_logpdf_node(z, g.const(mean), g.const(var), noise_var).value)


def log_prior_inducing(prior):
    """log p(u | S, theta) + log p(S); ``-inf`` when S leaves its box."""
    S = prior.inducing.S
    if np.any(S < prior.box_lo) or np.any(S > prior.box_hi):
        return -math.inf
    g = nx.ExprGraph()
    nd = layer_nodes(g, prior, as_param=False)
    t = fitc_terms(prior.kind, nd.log_ls, nd.log_var, nd.S, nd.u, S[:1],
                   n_groups=prior.n_groups)
    return float(log_prior_inducing_node(t, S, prior.box_lo, prior.box_hi).value)


def dense_gp_log_prior(Z, X, kind, params, noise_var=0.0, groups=None):
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    if Z.shape[0] > DENSE_LIMIT:
        raise TooLarge(f"dense GP prior limited to {DENSE_LIMIT} points, got {Z.shape[0]}")
    g = nx.ExprGraph()
    node = dense_gp_log_prior_node(g.const(Z), np.atleast_2d(X), kind,
                                   g.const(params.log_lengthscales),
                                   g.const(params.log_variance), noise_var, groups)
    return float(node.value)


def hidden_eps(prior, b, rng):
    """Standard-normal draws for every hidden layer of a deep prior."""
    return [rng.standard_normal((b, layer.n_channels)) for layer in prior.layers[:-1]]


def deep_gp_propagate(prior, X, rng, groups=None):
    """Monte Carlo propagation through a deep GP; last layer in closed form."""
    if isinstance(prior, SparseGPPrior):
        prior = DeepGPPrior([prior])
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if prior.L == 1:
        return fitc_moments(prior.layers[0], X, groups)
    g = nx.ExprGraph()
    nodes = [layer_nodes(g, p, as_param=False) for p in prior.layers]
    eps = hidden_eps(prior, X.shape[0], rng)
    last, _ = deep_propagate_nodes(prior.layers, nodes, g.const(X), eps,
                                   _groups_or_zero(groups, X.shape[0]))
    return last.mean.value, last.var.value


def predict_latent(prior, x_star, rng, mode="mean", groups=None):
    """Latent codes at new auxiliary inputs: FITC mean or a noisy draw."""
    if mode not in ("mean", "sample"):
        raise ValueError(f"mode must be 'mean' or 'sample', got {mode!r}")
    x_star = np.atleast_2d(np.asarray(x_star, dtype=np.float64))
    if isinstance(prior, DeepGPPrior):
        mean, var = deep_gp_propagate(prior, x_star, rng, groups)
        noise = prior.layers[-1].noise_var
    else:
        mean, var = fitc_moments(prior, x_star, groups)
        noise = prior.noise_var
    if mode == "mean":
        return mean
    sd = np.sqrt(var + noise)[:, None]
    return mean + sd * rng.standard_normal(mean.shape)


def with_params(prior, params=None, S=None, u=None):
    """Copy of a prior with some fields swapped (used when unpacking samples)."""
    inducing = prior.inducing
    if S is not None or u is not None:
        inducing = InducingSet(inducing.S if S is None else S,
                               inducing.u if u is None else u, inducing.n_groups)
    return replace(prior, params=params or prior.params, inducing=inducing)
