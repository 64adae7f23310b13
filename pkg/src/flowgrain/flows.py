"""Autoregressive normalizing flows: MAF and BNAF density models.

Both model kinds map data x to a latent z of the same dimension through a
stack of invertible transforms whose Jacobians are triangular under some
ordering, so

    log p(x) = sum_i logN(z_i; 0, 1) + sum_flows logdet,

with each flow's logdet read off the Jacobian diagonal.

MAF flows are affine autoregressive transforms
    z_i = (x_i - mu_i(x_<i)) * exp(-alpha_i(x_<i)),
where (mu, alpha) are the two heads of one masked (MADE) network and the
logdet contribution is -sum_i alpha_i. alpha is soft-clamped to [-10, 10]
via 10*tanh(alpha/10) to keep early optimization from blowing up the
logdet. Batch-norm flows (invertible per-dimension affine normalizers)
are interleaved between MAF flows.

BNAF flows are single-hidden-layer block lower-triangular networks: each
dimension owns a block of hidden units, diagonal-block weights are made
strictly positive by exponentiating their free parameters (so every z_i
is strictly increasing in x_i), and the per-dimension derivative is
accumulated in log space with log-sum-exp over the diagonal blocks.

Dimension order is reversed between consecutive flows (for MAF through
the MADE degrees, for BNAF through an input permutation) unless the
config says otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import NonFiniteError, UnsupportedOperationError

LOG_2PI = float(np.log(2.0 * np.pi))
ALPHA_CLAMP = 10.0
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class FlowConfig:
    kind: str = "maf"              # "maf" or "bnaf"
    input_dim: int = 2
    n_flows: int = 5               # Table-2 defaults: maf 5, bnaf 6
    hidden_width: int = 100        # maf: relu units; bnaf: block multiplier
    activation: str = "relu"       # maf hidden activation; bnaf uses tanh
    use_batchnorm: bool = True     # maf only
    ordering: str = "reversed-per-flow"  # or "natural"

    @staticmethod
    def maf_default(input_dim):
        return FlowConfig(kind="maf", input_dim=input_dim, n_flows=5,
                          hidden_width=100, activation="relu",
                          use_batchnorm=True)

    @staticmethod
    def bnaf_default(input_dim):
        return FlowConfig(kind="bnaf", input_dim=input_dim, n_flows=6,
                          hidden_width=12, activation="tanh",
                          use_batchnorm=False)

    def validate(self):
        if self.kind not in ("maf", "bnaf"):
            raise ValueError(f"unknown flow kind '{self.kind}'")
        if self.ordering not in ("natural", "reversed-per-flow"):
            raise ValueError(f"unknown ordering policy '{self.ordering}'")
        if self.input_dim < 1 or self.n_flows < 1 or self.hidden_width < 1:
            raise ValueError("input_dim, n_flows and hidden_width must be >= 1")


# ---------------------------------------------------------------------------
# MADE masks


@dataclass
class MadeMasks:
    degrees: list            # per layer, starting with the input degrees
    hidden_masks: list       # one (fan_in, fan_out) 0/1 array per hidden layer
    output_mask: np.ndarray  # last hidden -> per-dimension outputs, strict


def ordering_degrees(d, policy, flow_index):
    """Input degrees (1..d) for a given flow under the ordering policy."""
    base = np.arange(1, d + 1)
    if policy == "reversed-per-flow" and flow_index % 2 == 1:
        return base[::-1].copy()
    return base


def build_made_masks(d, hidden_widths, ordering):
    """Binary masks enforcing that output unit i has no path from input j
    whenever degree(j) >= degree(i).

    Hidden degrees cycle through 1..d-1; for d == 1 they are all zero, so
    every output is unconditional (valid, degenerate).
    """
    ordering = np.asarray(ordering, dtype=np.int64)
    degrees = [ordering]
    for width in hidden_widths:
        deg = np.arange(width) % max(1, d - 1) + min(1, d - 1)
        degrees.append(deg)
    hidden_masks = []
    for prev, nxt in zip(degrees[:-1], degrees[1:]):
        hidden_masks.append((prev[:, None] <= nxt[None, :]).astype(np.float64))
    output_mask = (degrees[-1][:, None] < ordering[None, :]).astype(np.float64)
    return MadeMasks(degrees=degrees, hidden_masks=hidden_masks,
                     output_mask=output_mask)


# ---------------------------------------------------------------------------
# flow layers


class MafFlow:
    """One affine autoregressive flow backed by a two-head MADE network."""

    def __init__(self, d, hidden_width, ordering, rng, activation="relu"):
        self.d = d
        self.hidden_width = hidden_width
        self.activation = activation
        self.masks = build_made_masks(d, [hidden_width], ordering)
        self.ordering = np.asarray(ordering, dtype=np.int64)
        a0 = 1.0 / np.sqrt(d)
        self.w_hidden = ad.parameter(rng.uniform(-a0, a0, size=(d, hidden_width)))
        self.b_hidden = ad.parameter(np.zeros(hidden_width))
        a1 = 0.01 / np.sqrt(hidden_width)
        self.w_mu = ad.parameter(rng.uniform(-a1, a1, size=(hidden_width, d)))
        self.b_mu = ad.parameter(np.zeros(d))
        self.w_alpha = ad.parameter(rng.uniform(-a1, a1, size=(hidden_width, d)))
        self.b_alpha = ad.parameter(np.zeros(d))

    def parameters(self):
        return {"w_hidden": self.w_hidden, "b_hidden": self.b_hidden,
                "w_mu": self.w_mu, "b_mu": self.b_mu,
                "w_alpha": self.w_alpha, "b_alpha": self.b_alpha}

    def net(self, x):
        """The masked network heads: (mu, soft-clamped alpha)."""
        h = ad.affine(ad.masked_matmul(x, self.w_hidden, self.masks.hidden_masks[0]),
                      shift=self.b_hidden)
        h = ad.relu(h) if self.activation == "relu" else ad.tanh(h)
        mu = ad.affine(ad.masked_matmul(h, self.w_mu, self.masks.output_mask),
                       shift=self.b_mu)
        raw = ad.affine(ad.masked_matmul(h, self.w_alpha, self.masks.output_mask),
                        shift=self.b_alpha)
        inv_c = ad.constant(1.0 / ALPHA_CLAMP)
        c = ad.constant(ALPHA_CLAMP)
        alpha = ad.mul(ad.tanh(ad.mul(raw, inv_c)), c)
        return mu, alpha

    def forward(self, x):
        mu, alpha = self.net(x)
        z = ad.mul(ad.sub(x, mu), ad.exp(ad.neg(alpha)))
        logdet = ad.neg(ad.reduce_sum(alpha, axis=1))
        return z, logdet

    def invert(self, z):
        """Sequential per-dimension inversion, eval arrays only."""
        z = np.asarray(z, dtype=np.float64)
        x = np.zeros_like(z)
        order = np.argsort(self.ordering, kind="stable")  # indices by degree
        for idx in order:
            mu, alpha = self.net(ad.Tensor(x))
            x[:, idx] = z[:, idx] * np.exp(alpha.data[:, idx]) + mu.data[:, idx]
        return x


class BatchNormFlow:
    """Invertible per-dimension affine normalizer.

    Train mode normalizes by batch statistics (and optionally updates the
    running EMA); eval mode applies the fixed affine map given by the
    running statistics. gamma is parameterized as exp(log_gamma) so the
    logdet term sum_i (log gamma_i - 0.5 log(v_i + eps)) is defined for
    every parameter value.
    """

    def __init__(self, d, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.d = d
        self.eps = eps
        self.momentum = momentum
        self.log_gamma = ad.parameter(np.zeros(d))
        self.beta = ad.parameter(np.zeros(d))
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)

    def parameters(self):
        return {"log_gamma": self.log_gamma, "beta": self.beta}

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False, update_stats=False):
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch-norm flow needs batch >= 2 in train mode")
            m = ad.reduce_mean(x, axis=0)
            xc = ad.affine(x, shift=ad.neg(m))
            v = ad.reduce_mean(ad.mul(xc, xc), axis=0)
            if update_stats:
                mom = self.momentum
                self.running_mean = (1 - mom) * self.running_mean + mom * m.data
                self.running_var = (1 - mom) * self.running_var + mom * v.data
        else:
            m = ad.constant(self.running_mean)
            xc = ad.affine(x, shift=ad.neg(m))
            v = ad.constant(self.running_var)
        vp = ad.add(v, ad.constant(self.eps))
        log_vp = ad.log(vp)
        inv_std = ad.exp(ad.mul(log_vp, ad.constant(-0.5)))
        y = ad.affine(xc, scale=ad.mul(ad.exp(self.log_gamma), inv_std),
                      shift=self.beta)
        logdet = ad.reduce_sum(ad.sub(self.log_gamma,
                                      ad.mul(log_vp, ad.constant(0.5))))
        return y, logdet  # logdet is a scalar, identical for every sample

    def invert(self, y):
        y = np.asarray(y, dtype=np.float64)
        gamma = np.exp(self.log_gamma.data)
        std = np.sqrt(self.running_var + self.eps)
        return (y - self.beta.data) / gamma * std + self.running_mean


class BlockLayer:
    """One block lower-triangular layer of a BNAF flow.

    Maps (B, d*a) to (B, d*b). Block (i, j) connects dimension i's ``a``
    units to dimension j's ``b`` units; it is zero for i > j, free for
    i < j, and exp(free) for i == j, so the free diagonal parameters ARE
    the logs of the diagonal-block weights.
    """

    def __init__(self, d, a, b, rng, init_log_diag=0.0):
        self.d, self.a, self.b = d, a, b
        jitter = rng.uniform(-0.01, 0.01, size=(d * a, d * b))
        diag_init = np.full((d * a, d * b), init_log_diag)
        self.w_diag = ad.parameter((diag_init + jitter) * self._diag_mask(d, a, b))
        self.w_off = ad.parameter(
            rng.uniform(-0.05, 0.05, size=(d * a, d * b)) * self._off_mask(d, a, b))
        self.bias = ad.parameter(np.zeros(d * b))
        self.diag_mask = self._diag_mask(d, a, b)
        self.off_mask = self._off_mask(d, a, b)

    @staticmethod
    def _block_index(d, a, b):
        rows = np.repeat(np.arange(d), a)[:, None]
        cols = np.repeat(np.arange(d), b)[None, :]
        return rows, cols

    @classmethod
    def _diag_mask(cls, d, a, b):
        rows, cols = cls._block_index(d, a, b)
        return (rows == cols).astype(np.float64)

    @classmethod
    def _off_mask(cls, d, a, b):
        rows, cols = cls._block_index(d, a, b)
        return (rows < cols).astype(np.float64)

    def parameters(self):
        return {"w_diag": self.w_diag, "w_off": self.w_off, "bias": self.bias}

    def effective_weight(self):
        dm = ad.constant(self.diag_mask)
        om = ad.constant(self.off_mask)
        return ad.add(ad.mul(ad.exp(self.w_diag), dm), ad.mul(self.w_off, om))

    def apply(self, x):
        """Pre-activation output x @ W_eff + bias."""
        return ad.affine(ad.matmul(x, self.effective_weight()), shift=self.bias)

def _log_tanh_deriv(h):
    """Elementwise log(1 - tanh(h)^2), stable for large |h|:
    log 4 - 2h - 2*softplus(-2h), softplus via log-sum-exp against 0."""
    shape = h.shape
    n = int(np.prod(shape))
    u = ad.mul(h, ad.constant(-2.0))
    stacked = ad.matmul(ad.reshape(u, (n, 1)), ad.constant(np.array([[1.0, 0.0]])))
    softplus = ad.logsumexp(stacked, axis=1)          # (n,)
    out = ad.add(ad.add(ad.reshape(u, (n,)), ad.mul(softplus, ad.constant(-2.0))),
                 ad.constant(np.log(4.0)))
    return ad.reshape(out, shape)


class BnafFlow:
    """Block neural autoregressive flow with one hidden layer per flow:
    d -> m*d -> d with tanh in between, block lower-triangular weights and
    strictly positive diagonal blocks."""

    def __init__(self, d, multiplier, rng, reverse=False):
        self.d = d
        self.m = multiplier
        self.reverse = reverse
        # product of the two diagonal blocks sums to ~1 over the m hidden
        # units at init, giving a near-identity map for small inputs
        init = -0.5 * np.log(multiplier) if multiplier > 1 else 0.0
        self.layer_in = BlockLayer(d, 1, multiplier, rng, init_log_diag=init)
        self.layer_out = BlockLayer(d, multiplier, 1, rng, init_log_diag=init)
        if reverse:
            perm = np.arange(d)[::-1]
            pmat = np.zeros((d, d))
            pmat[perm, np.arange(d)] = 1.0
            self.pmat = pmat
        else:
            self.pmat = None

    def parameters(self):
        out = {}
        for tag, layer in (("in", self.layer_in), ("out", self.layer_out)):
            for name, p in layer.parameters().items():
                out[f"{tag}.{name}"] = p
        return out

    def forward(self, x):
        if self.pmat is not None:
            x = ad.matmul(x, ad.constant(self.pmat))
        h_pre = self.layer_in.apply(x)                    # (B, m*d)
        h = ad.tanh(h_pre)
        z = self.layer_out.apply(h)                       # (B, d)
        if self.pmat is not None:
            z = ad.matmul(z, ad.constant(self.pmat.T))

        # per-dimension log-derivative: logsumexp over each dimension's m
        # hidden units of  logW_in + log tanh'(h_pre) + logW_out
        batch = h_pre.shape[0]
        p_in = self._diag_param_dm(self.layer_in)         # (d, m)
        p_out = self._diag_param_dm(self.layer_out)       # (d, m)
        a = ad.reshape(ad.add(p_in, p_out), (self.d * self.m,))
        lsig = _log_tanh_deriv(h_pre)                     # (B, m*d)
        s = ad.affine(lsig, shift=a)
        s3 = ad.reshape(s, (batch, self.d, self.m))
        logdet = ad.reduce_sum(ad.logsumexp(s3, axis=2), axis=1)  # (B,)
        return z, logdet

    def _diag_param_dm(self, layer):
        """Log diagonal-block weights laid out as (d, m).

        layer_in stores them at [i, i*m+q]; layer_out at [i*m+q, i]. Both
        gathers are expressed with constant selector matmuls so gradients
        flow to the free parameters.
        """
        d, m = self.d, self.m
        picked = ad.mul(layer.w_diag, ad.constant(layer.diag_mask))
        if layer.a == 1:  # (d, m*d): row i, columns i*m..(i+1)*m
            # collapse the column blocks: (d, m*d) @ (m*d, m) selector that
            # sends column j*m+q to output column q; masked rows keep only
            # their own block so the sum is exact.
            sel = np.tile(np.eye(m), (d, 1))              # (m*d, m)
            return ad.matmul(picked, ad.constant(sel))
        # (m*d, d): rows i*m+q, column i -> transpose then gather columns
        pt = ad.transpose(picked)                          # (d, m*d)
        sel = np.tile(np.eye(m), (d, 1))                   # (m*d, m)
        return ad.matmul(pt, ad.constant(sel))


# ---------------------------------------------------------------------------
# the composed model


class FlowModel:
    """A stack of flows plus a standard-normal base distribution."""

    def __init__(self, config, rng=None):
        config.validate()
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        d = config.input_dim
        self.flows = []
        if config.kind == "maf":
            for i in range(config.n_flows):
                order = ordering_degrees(d, config.ordering, i)
                self.flows.append(MafFlow(d, config.hidden_width, order, rng,
                                          activation=config.activation))
                if config.use_batchnorm:
                    self.flows.append(BatchNormFlow(d))
        else:
            for i in range(config.n_flows):
                reverse = config.ordering == "reversed-per-flow" and i % 2 == 1
                self.flows.append(BnafFlow(d, config.hidden_width, rng,
                                           reverse=reverse))

    @property
    def input_dim(self):
        return self.config.input_dim

    def parameters(self):
        out = {}
        for i, flow in enumerate(self.flows):
            for name, p in flow.parameters().items():
                out[f"flows.{i}.{name}"] = p
        return out

    def state_arrays(self):
        out = {}
        for i, flow in enumerate(self.flows):
            if isinstance(flow, BatchNormFlow):
                for name, arr in flow.state().items():
                    out[f"flows.{i}.{name}"] = arr
        return out

    def set_state_array(self, name, arr):
        _, idx, field_name = name.split(".", 2)
        flow = self.flows[int(idx)]
        setattr(flow, field_name, np.asarray(arr, dtype=np.float64))

    def forward(self, x, train=False, update_stats=False):
        """Compose all flows; returns (z, per-sample logdet)."""
        x = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        batch = x.shape[0]
        logdet = ad.constant(np.zeros(batch))
        for i, flow in enumerate(self.flows):
            try:
                if isinstance(flow, BatchNormFlow):
                    x, ld = flow.forward(x, train=train, update_stats=update_stats)
                else:
                    x, ld = flow.forward(x)
            except NonFiniteError as exc:
                raise NonFiniteError(f"flow {i}: {exc.where}") from exc
            logdet = ad.add(logdet, ld)  # scalar ld broadcasts
        return x, logdet

    def log_prob_t(self, x, train=False, update_stats=False):
        """(B,) tensor of log-likelihoods; differentiable."""
        z, logdet = self.forward(x, train=train, update_stats=update_stats)
        d = self.config.input_dim
        sq = ad.mul(ad.reduce_sum(ad.mul(z, z), axis=1), ad.constant(-0.5))
        base = ad.add(sq, ad.constant(-0.5 * d * LOG_2PI))
        return ad.add(base, logdet)

    def log_prob(self, x):
        """(B,) ndarray of log-likelihoods in eval mode (no recording)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        return self.log_prob_t(ad.Tensor(x)).data

    def mean_nll_t(self, x, train=False, update_stats=False):
        return ad.neg(ad.reduce_mean(self.log_prob_t(
            x, train=train, update_stats=update_stats)))

    def invert(self, z):
        """Latents back to data space; MAF only (BNAF has no closed form)."""
        if self.config.kind != "maf":
            raise UnsupportedOperationError("invert is not available for BNAF models")
        x = np.asarray(z, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        for flow in reversed(self.flows):
            x = flow.invert(x)
        return x

    def param_vector_names(self):
        return list(self.parameters().keys())
