"""Bayesian autoencoders with structured latent priors.

The decoder, the latent codes of the current mini-batch and (for GP
priors) the kernel hyperparameters, inducing inputs and inducing variables
are sampled with SGHMC.  The encoder is a stochastic inference network
``z = f(y, eps)`` that is regressed onto the latest SGHMC latent draws.

Four latent priors are supported:

``bae``       i.i.d. standard normal
``gp-bae``    exact GP (full batch only)
``sgp-bae``   FITC sparse GP
``dsgp-bae``  stack of FITC sparse GPs
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from . import sparse_gp as sgp
from .errors import EmptyPosterior, NoMissing, NonFiniteGradient
from .kernels import (HyperPriors, KernelKind, KernelParams, kernel_matrix, log_jacobian_node,
                      log_prior_hyper_node)
from .sghmc import SamplerState, SghmcConfig, sghmc_step

MODEL_KINDS = ("bae", "gp-bae", "sgp-bae", "dsgp-bae")
ACTIVATIONS = {"tanh": nx.tanh, "relu": nx.relu, "elu": nx.elu}


# ---------------------------------------------------------------------------
# networks


@dataclass
class MLP:
    """Fully connected net; hidden layers use ``activation``, output is linear."""

    weights: list
    activation: str = "tanh"

    @classmethod
    def init(cls, sizes, rng, activation="tanh"):
        weights = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
            weights.append((W, np.zeros(fan_out)))
        return cls(weights, activation)

    @property
    def in_dim(self):
        return self.weights[0][0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1][0].shape[1]

    def arrays(self):
        return [a for pair in self.weights for a in pair]

    def with_arrays(self, arrays):
        it = iter(arrays)
        return replace(self, weights=[(next(it), next(it)) for _ in self.weights])

    def forward(self, x):
        return mlp_node(nx.ExprGraph().const(x), self.arrays(), self.activation).value


def mlp_node(x, arrays, activation):
    act = ACTIVATIONS[activation]
    h = x
    n_layers = len(arrays) // 2
    for i in range(n_layers):
        h = nx.matmul(h, arrays[2 * i]) + arrays[2 * i + 1]
        if i < n_layers - 1:
            h = act(h)
    return h


@dataclass
class EncoderNet:
    net: MLP
    seed_dim: int

    @property
    def n_latent(self):
        return self.net.out_dim


@dataclass
class DecoderNet:
    net: MLP
    beta: float = 100.0
    prior_var: float = 1.0

    @property
    def n_latent(self):
        return self.net.in_dim

    @property
    def n_outputs(self):
        return self.net.out_dim


def encoder_input(y, eps):
    return np.concatenate([np.atleast_2d(y), np.atleast_2d(eps)], axis=1)


def encode(enc, y, eps):
    """Deterministic forward pass over ``[y, eps]``."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if eps.shape != (y.shape[0], enc.seed_dim):
        raise nx.ShapeMismatch(f"seed shape {eps.shape}, expected {(y.shape[0], enc.seed_dim)}")
    return enc.net.forward(encoder_input(y, eps))


def decode(dec, z):
    return dec.net.forward(np.atleast_2d(z))


# ---------------------------------------------------------------------------
# energy terms


def decoder_loglik_node(z, dec_arrays, activation, beta, y, mask):
    """sum over observed (n, p) of log N(y_np; decoder(z_n)_p, 1/beta)."""
    pred = mlp_node(z, dec_arrays, activation)
    mask = np.asarray(mask, dtype=np.float64)
    resid = (pred - np.where(mask > 0, y, 0.0)) * mask
    n_obs = float(mask.sum())
    return (nx.sum_(nx.square(resid)) * (-0.5 * beta)
            + 0.5 * n_obs * (math.log(beta) - nx.LOG_2PI))


def decoder_log_likelihood(dec, z, y, mask=None):
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    mask = np.ones(y.shape, bool) if mask is None else np.asarray(mask, bool)
    g = nx.ExprGraph()
    node = decoder_loglik_node(g.const(np.atleast_2d(z)), dec.net.arrays(),
                               dec.net.activation, dec.beta, y, mask)
    return float(node.value)


def weight_logprior_node(arrays, prior_var):
    """Isotropic Gaussian log-density of all decoder weights."""
    total = None
    n = 0
    for a in arrays:
        s = nx.sum_(nx.square(a))
        total = s if total is None else total + s
        n += a.value.size if isinstance(a, nx.Node) else np.size(a)
    return total * (-0.5 / prior_var) - 0.5 * n * math.log(2.0 * math.pi * prior_var)


@dataclass
class Batch:
    indices: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    mask: np.ndarray
    Z: np.ndarray
    groups: np.ndarray = None

    def __post_init__(self):
        if self.mask.shape != self.Y.shape:
            raise ValueError("mask and Y shapes differ")
        if self.groups is None:
            self.groups = np.zeros(len(self.indices), dtype=int)

    @property
    def size(self):
        return len(self.indices)


def iid_latent_logprior_node(z, x=None):
    return nx.gaussian_logpdf(z, 0.0, 1.0)


def energy_bae(batch, dec, N, latent_logprior=iid_latent_logprior_node):
    """Mini-batch energy with a per-point latent prior (default N(0, I))."""
    g = nx.ExprGraph()
    root = _bae_energy_node(g, batch, [g.const(a) for a in dec.net.arrays()], dec,
                            g.const(batch.Z), N, latent_logprior)
    return float(root.value)


def _bae_energy_node(g, batch, dec_nodes, dec, z, N, latent_logprior):
    energy = -weight_logprior_node(dec_nodes, dec.prior_var)
    if batch.size:
        data = (latent_logprior(z, batch.X)
                + decoder_loglik_node(z, dec_nodes, dec.net.activation, dec.beta,
                                      batch.Y, batch.mask))
        energy = energy - data * (N / batch.size)
    return energy


def _sgp_energy_node(g, batch, dec_nodes, dec, z, N, priors, layer_nodes_, hyper, eps=None):
    """Negative log joint of the sparse (possibly deep) GP autoencoder."""
    energy = -weight_logprior_node(dec_nodes, dec.prior_var)
    x_for_terms = batch.X if batch.size else priors[0].inducing.S[:1]
    last, terms = sgp.deep_propagate_nodes(priors, layer_nodes_, g.const(x_for_terms),
                                           eps or [], batch.groups if batch.size else None)
    for prior, nd, t in zip(priors, layer_nodes_, terms):
        energy = (energy - log_prior_hyper_node(nd.log_ls, nd.log_var, hyper)
                  - log_jacobian_node(nd.log_ls, nd.log_var)
                  - sgp.log_prior_inducing_node(t, nd.S.value, prior.box_lo, prior.box_hi))
    if batch.size:
        data = (sgp.latent_marginal_logpdf_node(z, last.mean, last.var, priors[-1].noise_var)
                + decoder_loglik_node(z, dec_nodes, dec.net.activation, dec.beta,
                                      batch.Y, batch.mask))
        energy = energy - data * (N / batch.size)
    return energy


def energy_sgpbae(batch, dec, gp, N, hyper=None, eps=None, with_grads=False):
    """Mini-batch energy of the sparse-GP autoencoder.

    ``gp`` is a :class:`SparseGPPrior` or :class:`DeepGPPrior`.  With
    ``with_grads`` returns ``(value, grads)`` where ``grads`` maps
    ``"decoder"``, ``"z"`` and per-layer ``"log_lengthscales"``,
    ``"log_variance"``, ``"S"``, ``"u"`` to gradient arrays.
    """
    hyper = hyper or HyperPriors()
    priors = gp.layers if isinstance(gp, sgp.DeepGPPrior) else [gp]
    g = nx.ExprGraph()
    dec_nodes = [g.param(a) for a in dec.net.arrays()]
    z = g.param(batch.Z)
    lnodes = [sgp.layer_nodes(g, p, prefix=f"gp{l}.") for l, p in enumerate(priors)]
    root = _sgp_energy_node(g, batch, dec_nodes, dec, z, N, priors, lnodes, hyper, eps)
    if not with_grads:
        return float(root.value)
    value, grads = nx.evaluate_with_gradients(g, root)
    out = {"decoder": [grads[n] for n in dec_nodes], "z": grads[z], "layers": []}
    for nd in lnodes:
        out["layers"].append({"log_lengthscales": grads[nd.log_ls], "log_variance": grads[nd.log_var],
                              "S": grads[nd.S], "u": grads[nd.u]})
    return value, out


def encoder_distill_loss_node(enc_nodes, activation, y, eps, labels):
    out = mlp_node(enc_nodes[0].graph.const(encoder_input(y, eps)),
                   enc_nodes, activation)
    return nx.sum_(nx.square(out - labels))


def encoder_distill_loss(enc, y, eps, labels):
    """Sum of squared distances between encoder outputs and latent labels."""
    g = nx.ExprGraph()
    nodes = [g.const(a) for a in enc.net.arrays()]
    return float(encoder_distill_loss_node(nodes, enc.net.activation, y, eps, labels).value)


# ---------------------------------------------------------------------------
# model configuration and parameter packing


@dataclass
class ModelConfig:
    kind: str = "sgp-bae"
    latent_dim: int = 2
    encoder_hidden: tuple = (128,)
    decoder_hidden: tuple = (128,)
    activation: str = "tanh"
    beta: float = 100.0
    decoder_prior_var: float = 1.0
    kernel: KernelKind = field(default_factory=KernelKind)
    n_inducing: int = 10
    noise_var: float = 0.01
    deep_hidden: tuple = (2, 2)
    hidden_box: float = 10.0
    box_pad: float = 0.05
    hyper: HyperPriors = field(default_factory=HyperPriors)
    init_lengthscale: float = 1.0
    init_variance: float = 0.05
    batch_size: int = None
    K: int = 50
    J: int = 30

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        self.deep_hidden = tuple(self.deep_hidden)


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, arrays, cfg):
        self.cfg = cfg
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        c = self.cfg
        self.t += 1
        out = []
        for i, (a, gr) in enumerate(zip(arrays, grads)):
            self.m[i] = c.beta1 * self.m[i] + (1 - c.beta1) * gr
            self.v[i] = c.beta2 * self.v[i] + (1 - c.beta2) * gr * gr
            mh = self.m[i] / (1 - c.beta1**self.t)
            vh = self.v[i] / (1 - c.beta2**self.t)
            out.append(a - c.lr * mh / (np.sqrt(vh) + c.eps))
        return out


class Layout:
    """Ordered named arrays packed into one flat vector."""

    def __init__(self, entries):
        self.names = [n for n, _ in entries]
        self.shapes = {n: tuple(s) for n, s in entries}
        self.slices = {}
        start = 0
        for n, s in entries:
            size = int(np.prod(s, dtype=int))
            self.slices[n] = slice(start, start + size)
            start += size
        self.size = start

    def pack(self, values):
        if not self.names:
            return np.zeros(0)
        return np.concatenate([np.asarray(values[n], dtype=np.float64).ravel() for n in self.names])

    def unpack(self, flat):
        return {n: flat[self.slices[n]].reshape(self.shapes[n]) for n in self.names}


@dataclass
class PosteriorSample:
    """One draw of the decoder weights and GP parameters."""

    values: dict
    snapshot: int = 0


class Model:
    """Binds a :class:`ModelConfig` to data dimensions and packs parameters."""

    def __init__(self, cfg, in_dim, out_dim, aux_dim, n_groups=1, box=None):
        self.cfg = cfg
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.aux_dim = aux_dim
        self.n_groups = n_groups
        C = cfg.latent_dim
        dec_sizes = (C,) + cfg.decoder_hidden + (out_dim,)
        entries = []
        for i, (a, b) in enumerate(zip(dec_sizes[:-1], dec_sizes[1:])):
            entries += [(f"dec.W{i}", (a, b)), (f"dec.b{i}", (b,))]
        self.dec_sizes = dec_sizes
        self.layer_widths = []
        if cfg.kind in ("sgp-bae", "dsgp-bae"):
            widths = (aux_dim,) + (cfg.deep_hidden if cfg.kind == "dsgp-bae" else ()) + (C,)
            self.layer_widths = list(zip(widths[:-1], widths[1:]))
            for l, (d_in, d_out) in enumerate(self.layer_widths):
                entries += [(f"gp{l}.log_ls", (d_in,)), (f"gp{l}.log_var", ()),
                            (f"gp{l}.S", (cfg.n_inducing, d_in)),
                            (f"gp{l}.u", (cfg.n_inducing, n_groups * d_out))]
        elif cfg.kind == "gp-bae":
            entries += [("gp0.log_ls", (aux_dim,)), ("gp0.log_var", ())]
        self.layout = Layout(entries)
        if box is None:
            box = (np.full(aux_dim, -np.inf), np.full(aux_dim, np.inf))
        self.box = (np.asarray(box[0], dtype=np.float64), np.asarray(box[1], dtype=np.float64))

    @classmethod
    def for_dataset(cls, cfg, dataset):
        box = sgp.inducing_box(dataset.X, cfg.box_pad)
        return cls(cfg, dataset.P, dataset.P, dataset.D, dataset.n_groups, box)

    @property
    def seed_dim(self):
        return self.in_dim

    @property
    def is_sparse(self):
        return bool(self.layer_widths)

    # -- initialization -----------------------------------------------------

    def init_encoder(self, rng):
        """Random encoder whose first-layer weights on the seed block start at zero.

        The initial latents are then a smooth function of the input rather
        than dominated by the seed; the seed weights are learned.
        """
        sizes = (self.in_dim + self.seed_dim,) + self.cfg.encoder_hidden + (self.cfg.latent_dim,)
        net = MLP.init(sizes, rng, self.cfg.activation)
        W0, b0 = net.weights[0]
        W0 = W0.copy()
        W0[self.in_dim:] = 0.0
        net.weights[0] = (W0, b0)
        return EncoderNet(net, self.seed_dim)

    def init_values(self, rng, X=None):
        cfg = self.cfg
        values = {}
        dec = MLP.init(self.dec_sizes, rng, cfg.activation)
        for i, (W, b) in enumerate(dec.weights):
            values[f"dec.W{i}"], values[f"dec.b{i}"] = W, b
        if cfg.kind == "gp-bae":
            values["gp0.log_ls"] = np.full(self.aux_dim, math.log(cfg.init_lengthscale))
            values["gp0.log_var"] = np.array(math.log(cfg.init_variance))
        for l, (d_in, d_out) in enumerate(self.layer_widths):
            values[f"gp{l}.log_ls"] = np.full(d_in, math.log(cfg.init_lengthscale))
            values[f"gp{l}.log_var"] = np.array(math.log(cfg.init_variance))
            if l == 0 and X is not None:
                S = sgp.init_inducing_inputs(X, cfg.n_inducing, rng)
            else:
                S = rng.uniform(-1.0, 1.0, (cfg.n_inducing, d_in))
            values[f"gp{l}.S"] = S
            values[f"gp{l}.u"] = np.zeros((cfg.n_inducing, self.n_groups * d_out))
        return values

    # -- views ----------------------------------------------------------------

    def decoder(self, values):
        arrays = [values[f"dec.{k}{i}"] for i in range(len(self.dec_sizes) - 1) for k in "Wb"]
        net = MLP([(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(arrays) // 2)],
                  self.cfg.activation)
        return DecoderNet(net, self.cfg.beta, self.cfg.decoder_prior_var)

    def layer_box(self, l):
        if l == 0:
            return self.box
        h = self.cfg.hidden_box
        d_in = self.layer_widths[l][0]
        return np.full(d_in, -h), np.full(d_in, h)

    def gp_prior(self, values):
        """SparseGPPrior / DeepGPPrior / KernelParams view of ``values``."""
        cfg = self.cfg
        if cfg.kind == "gp-bae":
            return KernelParams(values["gp0.log_ls"], float(values["gp0.log_var"]))
        if not self.is_sparse:
            return None
        layers = []
        for l in range(len(self.layer_widths)):
            lo, hi = self.layer_box(l)
            layers.append(sgp.SparseGPPrior(
                cfg.kernel,
                KernelParams(values[f"gp{l}.log_ls"], float(values[f"gp{l}.log_var"])),
                sgp.InducingSet(values[f"gp{l}.S"], values[f"gp{l}.u"], self.n_groups),
                noise_var=cfg.noise_var, box_lo=lo, box_hi=hi))
        if cfg.kind == "dsgp-bae":
            return sgp.DeepGPPrior(layers)
        return layers[0]

    def _layers(self, values):
        prior = self.gp_prior(values)
        return prior.layers if isinstance(prior, sgp.DeepGPPrior) else [prior]

    # -- energy -----------------------------------------------------------------

    def energy_node(self, g, nodes, batch, z, N, rng=None):
        """Energy as a graph node given parameter nodes keyed like the layout."""
        cfg = self.cfg
        dec_nodes = [nodes[f"dec.{k}{i}"] for i in range(len(self.dec_sizes) - 1) for k in "Wb"]
        dec = DecoderNet(MLP([], cfg.activation), cfg.beta, cfg.decoder_prior_var)
        if cfg.kind == "bae":
            return _bae_energy_node(g, batch, dec_nodes, dec, z, N, iid_latent_logprior_node)
        if cfg.kind == "gp-bae":
            if batch.size != N:
                raise ValueError("the exact GP prior needs full-batch energies")
            log_ls, log_var = nodes["gp0.log_ls"], nodes["gp0.log_var"]
            energy = (-weight_logprior_node(dec_nodes, dec.prior_var)
                      - log_prior_hyper_node(log_ls, log_var, cfg.hyper)
                      - log_jacobian_node(log_ls, log_var)
                      - sgp.dense_gp_log_prior_node(z, batch.X, cfg.kernel, log_ls, log_var,
                                                    cfg.noise_var, batch.groups)
                      - decoder_loglik_node(z, dec_nodes, cfg.activation, cfg.beta,
                                            batch.Y, batch.mask))
            return energy
        values = {n: nd.value for n, nd in nodes.items()}
        priors = self._layers(values)
        lnodes = [sgp.GPLayerNodes(nodes[f"gp{l}.log_ls"], nodes[f"gp{l}.log_var"],
                                   nodes[f"gp{l}.S"], nodes[f"gp{l}.u"])
                  for l in range(len(priors))]
        eps = None
        if len(priors) > 1:
            rng = rng or np.random.default_rng(0)
            eps = [rng.standard_normal((batch.size, w)) for _, w in self.layer_widths[:-1]]
        return _sgp_energy_node(g, batch, dec_nodes, dec, z, N, priors, lnodes, cfg.hyper, eps)

    def energy_and_grad(self, flat, batch, N, rng=None):
        """Energy and its gradient over the flat vector ``[psi, z]``."""
        g = nx.ExprGraph()
        values = self.layout.unpack(flat[: self.layout.size])
        nodes = {n: g.param(v, n) for n, v in values.items()}
        z = g.param(flat[self.layout.size:].reshape(batch.size, self.cfg.latent_dim), "z")
        root = self.energy_node(g, nodes, batch, z, N, rng)
        value, grads = nx.evaluate_with_gradients(g, root)
        parts = [grads[nodes[n]].ravel() for n in self.layout.names] + [grads[z].ravel()]
        return value, np.concatenate(parts)

    def reflect(self, state):
        """Reflect inducing inputs that left their uniform box (flip velocity)."""
        if not self.is_sparse:
            return state
        pos, vel = state.position, state.velocity
        changed = False
        for l in range(len(self.layer_widths)):
            sl = self.layout.slices[f"gp{l}.S"]
            lo, hi = self.layer_box(l)
            S = pos[sl].reshape(self.layout.shapes[f"gp{l}.S"])
            if np.all(S >= lo) and np.all(S <= hi):
                continue
            if not changed:
                pos, vel, changed = pos.copy(), vel.copy(), True
            V = vel[sl].reshape(S.shape)
            for _ in range(8):
                above, below = S > hi, S < lo
                if not (above.any() or below.any()):
                    break
                S = np.where(above, 2 * hi - S, np.where(below, 2 * lo - S, S))
                V = np.where(above | below, -V, V)
            S = np.clip(S, lo, hi)
            pos[sl], vel[sl] = S.ravel(), V.ravel()
        return replace(state, position=pos, velocity=vel) if changed else state


# ---------------------------------------------------------------------------
# training (amortized SGHMC)


@dataclass
class TrainResult:
    model: Model
    encoder: EncoderNet
    samples: list
    energies: list = field(default_factory=list)
    latents: np.ndarray = None
    latent_indices: np.ndarray = None

    @property
    def final_energy(self):
        return self.energies[-1] if self.energies else float("nan")


def _encoder_step(enc, opt, y_in, eps, labels):
    g = nx.ExprGraph()
    nodes = [g.param(a) for a in enc.net.arrays()]
    loss = encoder_distill_loss_node(nodes, enc.net.activation, y_in, eps, labels)
    value, grads = nx.evaluate_with_gradients(g, loss)
    new = opt.step(enc.net.arrays(), [grads[n] for n in nodes])
    return replace(enc, net=enc.net.with_arrays(new)), value


def train(dataset, model_cfg, sghmc_cfg, rng, adam_cfg=None, callback=None, model=None):
    """Amortized SGHMC over decoder, GP parameters and mini-batch latents.

    Each outer iteration draws a mini-batch, initializes its latents from
    the encoder, runs ``K`` SGHMC steps, then ``J`` Adam steps regressing
    the encoder onto the final latent draw.  Posterior samples are taken
    every ``thinning`` SGHMC steps after burn-in.
    """
    adam_cfg = adam_cfg or AdamConfig()
    model = model or Model.for_dataset(model_cfg, dataset)
    cfg = model_cfg
    N = dataset.N
    B = N if cfg.batch_size is None else min(cfg.batch_size, N)
    if cfg.kind == "gp-bae" and B != N:
        raise ValueError("gp-bae requires full-batch training")
    C = cfg.latent_dim
    enc = model.init_encoder(rng)
    values = model.init_values(rng, dataset.X)
    psi_size = model.layout.size
    state = SamplerState.init(np.concatenate([model.layout.pack(values), np.zeros(B * C)]))
    opt = Adam(enc.net.arrays(), adam_cfg)
    Y_in = dataset.Y_filled
    total = sghmc_cfg.total_steps
    result = TrainResult(model, enc, [], [])
    step = 0
    while step < total:
        idx = np.arange(N) if B == N else np.sort(rng.choice(N, B, replace=False))
        eps = rng.standard_normal((B, model.seed_dim))
        z0 = encode(enc, Y_in[idx], eps)
        pos = state.position.copy()
        vel = state.velocity.copy()
        pos[psi_size:] = z0.ravel()
        vel[psi_size:] = 0.0
        state = replace(state, position=pos, velocity=vel)
        batch = Batch(idx, dataset.Y[idx], dataset.X[idx], dataset.mask[idx], z0,
                      dataset.groups[idx])
        energy = [0.0]

        def grad_fn(flat):
            energy[0], grad = model.energy_and_grad(flat, batch, N, rng)
            return grad

        for _ in range(cfg.K):
            if step >= total:
                break
            if state.in_burn_in and step >= sghmc_cfg.adapt_until:
                state = replace(state, in_burn_in=False)
            try:
                state = sghmc_step(state, grad_fn, rng, sghmc_cfg)
            except NonFiniteGradient as exc:
                result.encoder = enc
                raise NonFiniteGradient(str(exc), last_good=result) from None
            state = model.reflect(state)
            result.energies.append(energy[0])
            step += 1
            post = step - sghmc_cfg.n_burn_in
            if post > 0 and post % sghmc_cfg.thinning == 0:
                psi = model.layout.unpack(state.position[:psi_size].copy())
                result.samples.append(PosteriorSample(psi, len(result.samples)))
                if callback is not None:
                    callback(result.samples[-1], state)
        labels = state.position[psi_size:].reshape(B, C)
        result.latents, result.latent_indices = labels.copy(), idx
        for _ in range(cfg.J):
            enc, _ = _encoder_step(enc, opt, Y_in[idx], eps, labels)
        result.encoder = enc
    return result


# ---------------------------------------------------------------------------
# prediction


def sample_latent(model, sample, x_star, rng, groups=None, mode="sample"):
    """Latent codes at ``x_star`` under a posterior sample's prior.

    ``mode="sample"`` draws from the prior predictive; ``mode="mean"``
    returns its mean.
    """
    x_star = np.atleast_2d(np.asarray(x_star, dtype=np.float64))
    C = model.cfg.latent_dim
    prior = model.gp_prior(sample.values)
    if prior is None:
        if mode == "mean":
            return np.zeros((x_star.shape[0], C))
        return rng.standard_normal((x_star.shape[0], C))
    if isinstance(prior, KernelParams):
        if mode == "mean":
            return np.zeros((x_star.shape[0], C))
        K = kernel_matrix(model.cfg.kernel, prior, x_star, x_star)
        K = K + model.cfg.noise_var * np.eye(len(K))
        L = nx.jittered_cholesky(K)
        return L @ rng.standard_normal((x_star.shape[0], C))
    return sgp.predict_latent(prior, x_star, rng, mode=mode, groups=groups)


def generate(model, samples, x_star, rng, groups=None, mode="sample"):
    """Mean and epistemic (across-sample) variance of decoded outputs.

    The observation noise ``1 / beta`` is not included in the variance.
    """
    if not samples:
        raise EmptyPosterior("no posterior samples")
    outs = []
    for s in samples:
        z = sample_latent(model, s, x_star, rng, groups, mode)
        outs.append(decode(model.decoder(s.values), z))
    outs = np.stack(outs)
    return outs.mean(axis=0), outs.var(axis=0)


def predictive_outputs(model, samples, encoder, Y_in, rng):
    """Decoded outputs for each posterior sample, latents from the encoder."""
    if not samples:
        raise EmptyPosterior("no posterior samples")
    outs = []
    for s in samples:
        eps = rng.standard_normal((Y_in.shape[0], encoder.seed_dim))
        z = encode(encoder, Y_in, eps)
        outs.append(decode(model.decoder(s.values), z))
    return np.stack(outs)


@dataclass
class Imputation:
    mean: np.ndarray
    std: np.ndarray
    missing: np.ndarray

    def filled(self, Y):
        return np.where(self.missing, self.mean, Y)


def impute(model, samples, dataset, encoder, rng):
    """Predictive mean and std for every entry; ``missing`` marks targets.

    Variance = across-sample variance + 1 / beta.
    """
    if not samples:
        raise EmptyPosterior("no posterior samples")
    missing = ~dataset.mask
    if not missing.any():
        raise NoMissing("dataset has no missing entries")
    outs = predictive_outputs(model, samples, encoder, dataset.Y_filled, rng)
    var = outs.var(axis=0) + 1.0 / model.cfg.beta
    return Imputation(outs.mean(axis=0), np.sqrt(var), missing)
