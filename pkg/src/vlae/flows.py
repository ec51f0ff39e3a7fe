"""Autoregressive-flow prior over latent codes.

The prior is a stack of autoregressive steps applied to spherical Gaussian
noise. Generation (noise -> latent) is sequential; the whitening direction
(latent -> noise), which is the one used on every training step, is a single
parallel pass per step because each conditioner reads only its input.

Mean-only steps have unit slope and hence exactly zero log-determinant; the
affine mode keeps the scale positive via softplus with a small floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .masks import build_made_masks

__all__ = ["Made", "FlowStep", "FlowStack", "log_noise_density",
           "identity_stack", "elbo_equivalence"]

LN_2PI = float(np.log(2.0 * np.pi))
SIGMA_FLOOR = 1e-4


class Made(object):
    """Masked MLP whose output unit i depends only on inputs ranked below i.

    ``n_heads`` independent output blocks share the hidden trunk; each block
    is masked identically. The final layers are zero-initialized so that a
    fresh conditioner is the identity map (mu = 0, log-scale pre-activation
    chosen so sigma = 1).
    """

    def __init__(self, dim, hidden, n_heads=1, ordering=None, rng=None,
                 name="made", head_bias_init=0.0):
        rng = rng or np.random.default_rng(0)
        sizes = [dim] + list(hidden) + [dim]
        mask_set = build_made_masks(sizes, ordering=ordering)
        self.ordering = mask_set.ordering
        self.dim = dim
        self.hidden_masks = mask_set.masks[:-1]
        self.out_mask = mask_set.masks[-1]
        self.weights = []
        self.biases = []
        prev = dim
        for li, width in enumerate(hidden):
            w = ad.Parameter(rng.standard_normal((prev, width)) / np.sqrt(prev),
                             name=f"{name}.w{li}")
            b = ad.Parameter(np.zeros(width), name=f"{name}.b{li}")
            self.weights.append(w)
            self.biases.append(b)
            prev = width
        self.head_weights = []
        self.head_biases = []
        for hidx in range(n_heads):
            w = ad.Parameter(np.zeros((prev, dim)), name=f"{name}.head{hidx}.w")
            b = ad.Parameter(np.full(dim, head_bias_init), name=f"{name}.head{hidx}.b")
            self.head_weights.append(w)
            self.head_biases.append(b)

    def parameters(self):
        return self.weights + self.biases + self.head_weights + self.head_biases

    def forward(self, z: ad.Tensor) -> list:
        """(B, D) -> list of (B, D) head outputs."""
        h = z
        for w, b, m in zip(self.weights, self.biases, self.hidden_masks):
            h = ad.relu(ad.add(ad.matmul(h, ad.mul(w, ad.Tensor(m))), b))
        outs = []
        for w, b in zip(self.head_weights, self.head_biases):
            outs.append(ad.add(ad.matmul(h, ad.mul(w, ad.Tensor(self.out_mask))), b))
        return outs

    def forward_np(self, z: np.ndarray) -> list:
        h = z
        for w, b, m in zip(self.weights, self.biases, self.hidden_masks):
            h = np.maximum(h @ (w.data * m) + b.data, 0.0)
        return [h @ (w.data * self.out_mask) + b.data
                for w, b in zip(self.head_weights, self.head_biases)]


class FlowStep(object):
    """One autoregressive step: z_i = eps_i * sigma_i(z_<i) + mu_i(z_<i)."""

    def __init__(self, dim, hidden=(64, 64), mode="mean-only", reverse=False,
                 rng=None, name="flow"):
        if mode not in ("mean-only", "affine"):
            raise ValueError(f"unknown flow mode {mode!r}")
        self.dim = dim
        self.mode = mode
        self.reverse = reverse
        ordering = np.arange(dim, 0, -1) if reverse else np.arange(1, dim + 1)
        n_heads = 1 if mode == "mean-only" else 2
        self.conditioner = Made(dim, hidden, n_heads=n_heads, ordering=ordering,
                                rng=rng, name=name)
        if mode == "affine":
            # bias the scale head so a fresh step starts at sigma = 1 (identity)
            raw = np.log(np.expm1(1.0 - SIGMA_FLOOR))
            self.conditioner.head_biases[1].data[:] = raw
            self.conditioner.head_biases[1].shadow[:] = raw

    def parameters(self):
        return self.conditioner.parameters()

    def _sigma(self, raw: ad.Tensor) -> ad.Tensor:
        return ad.add(ad.softplus(raw), ad.Tensor(np.array(SIGMA_FLOOR)))

    def inverse(self, z: ad.Tensor):
        """Parallel whitening pass: returns (eps, per-dim log|d eps / d z|)."""
        heads = self.conditioner.forward(z)
        mu = heads[0]
        if self.mode == "mean-only":
            eps = ad.sub(z, mu)
            logdet = ad.Tensor(np.zeros(z.shape))
        else:
            sigma = self._sigma(heads[1])
            if np.any(sigma.data < SIGMA_FLOOR / 2):
                raise ad.NumericError("flow scale underflow")
            eps = ad.div(ad.sub(z, mu), sigma)
            logdet = ad.neg(ad.log(sigma))
        return eps, logdet

    def forward_np(self, eps: np.ndarray):
        """Sequential generation pass (no gradients): returns (z, per-dim log|dz/d eps|)."""
        z = np.zeros_like(eps)
        order = np.argsort(self.conditioner.ordering)  # positions by rank
        logdet = np.zeros_like(eps)
        for pos in order:
            heads = self.conditioner.forward_np(z)
            mu = heads[0]
            if self.mode == "mean-only":
                z[..., pos] = eps[..., pos] + mu[..., pos]
            else:
                sigma = np.logaddexp(0.0, heads[1]) + SIGMA_FLOOR
                z[..., pos] = eps[..., pos] * sigma[..., pos] + mu[..., pos]
                logdet[..., pos] = np.log(sigma[..., pos])
        return z, logdet


class FlowStack(object):
    """Ordered flow steps mapping noise to latent code with exact log-density.

    Consecutive steps reverse the unit ordering by default so information can
    flow both ways along the latent dimensions.
    """

    def __init__(self, dim, n_steps=4, hidden=(64, 64), mode="mean-only",
                 alternate=True, rng=None):
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.steps = [
            FlowStep(dim, hidden=hidden, mode=mode,
                     reverse=alternate and (k % 2 == 1), rng=rng, name=f"flow{k}")
            for k in range(n_steps)
        ]

    def parameters(self):
        return [p for s in self.steps for p in s.parameters()]

    def inverse(self, z: ad.Tensor):
        """latent -> noise. Returns (eps, per-dim log|d eps/d z|) summed over steps."""
        eps = z
        logdet = ad.Tensor(np.zeros(z.shape))
        for step in reversed(self.steps):
            eps, ld = step.inverse(eps)
            logdet = ad.add(logdet, ld)
        return eps, logdet

    def forward_np(self, eps: np.ndarray):
        """noise -> latent (sequential, no gradients). Returns (z, per-dim log|dz/d eps|)."""
        z = eps
        logdet = np.zeros_like(eps)
        for step in self.steps:
            z, ld = step.forward_np(z)
            logdet += ld
        return z, logdet

    def log_prior_terms(self, z: ad.Tensor):
        """Per-dim log p(z) contributions: log u(eps_d) + summed per-dim log-dets."""
        eps, logdet = self.inverse(z)
        half = ad.scale(ad.mul(eps, eps), -0.5)
        log_u = ad.add(half, ad.Tensor(np.full(z.shape, -0.5 * LN_2PI)))
        return ad.add(log_u, logdet)

    def log_prior(self, z: ad.Tensor) -> ad.Tensor:
        """log p(z) per batch row: log u(f^-1(z)) + log|det d eps/d z|."""
        return ad.reduce_sum(self.log_prior_terms(z), axes=-1)


def log_noise_density(eps) -> np.ndarray:
    """Standard spherical Gaussian log-density, summed over the last axis."""
    eps = np.asarray(eps, dtype=np.float64)
    return -0.5 * eps.shape[-1] * LN_2PI - 0.5 * np.sum(eps ** 2, axis=-1)


def identity_stack(dim) -> FlowStack:
    """A zero-step stack: the prior is exactly the standard Gaussian."""
    return FlowStack(dim, n_steps=0)


def elbo_equivalence(stack: FlowStack, z: np.ndarray, log_q: np.ndarray,
                     decode_logprob) -> tuple:
    """Evaluate the same bound along the flowed-prior and whitened-posterior routes.

    Route one treats z as the latent code: log p(x|z) + log p(z) - log q(z|x).
    Route two whitens z to eps, regenerates z' = f(eps), and groups the
    change-of-variable term with the posterior:
    log p(x|f(eps)) + log u(eps) - (log q(z|x) - log|det d eps/d z|).
    The two are an algebraic rearrangement and must agree to round-off plus
    the forward/inverse round-trip error.
    """
    zt = ad.Tensor(np.asarray(z, dtype=np.float64))
    route_a = decode_logprob(zt).data + stack.log_prior(zt).data - log_q

    eps_t, logdet_t = stack.inverse(zt)
    eps = eps_t.data
    per_dim_logdet = np.sum(logdet_t.data, axis=-1)
    z_regen, _ = stack.forward_np(eps)
    route_b = (decode_logprob(ad.Tensor(z_regen)).data + log_noise_density(eps)
               - (log_q - per_dim_logdet))
    return route_a, route_b
