"""The full model: encoder, diagonal-Gaussian posterior, flowed prior, and
factorized / windowed-autoregressive decoders, with the surrogate training
objectives (hard and soft free bits) and the adaptive KL-weight controller.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .flows import LN_2PI, FlowStack, elbo_equivalence, log_noise_density
from .masks import ConvMask, ReceptiveField, grayscale, offsets_of_chain

__all__ = [
    "Dense", "Encoder",
    "FactorizedDecoder", "LocalARDecoder", "GrayscaleLocalARDecoder",
    "VHStackDecoder", "build_decoder",
    "ElboBreakdown", "FreeBitsState", "update_gamma",
    "VLAE",
]

PROB_CLAMP = 1e-7
LOGSTD_MIN, LOGSTD_MAX = -7.0, 2.0


class Dense(object):
    def __init__(self, n_in, n_out, rng, zero=False, name="dense"):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)
        self.w = Parameter(w, name=f"{name}.w")
        self.b = Parameter(np.zeros(n_out), name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.w), self.b)

    def parameters(self):
        return [self.w, self.b]


class Conv(object):
    """Masked same-padding convolution layer."""

    def __init__(self, mask: np.ndarray, rng, zero=False, name="conv",
                 kernel: Parameter | None = None):
        self.mask = mask
        co, ci, kh, kw = mask.shape
        if kernel is not None:
            self.kernel = kernel  # weight tying across layers
        else:
            fan_in = max(1, int(mask[0].sum()))
            k = np.zeros(mask.shape) if zero else \
                rng.standard_normal(mask.shape) / np.sqrt(fan_in)
            self.kernel = Parameter(k * mask, name=f"{name}.k")
        self.padding = (kh // 2, kh // 2, kw // 2, kw // 2)
        self.bias = Parameter(np.zeros(co), name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.kernel, self.mask, padding=self.padding)
        b = self.bias.data.reshape((-1, 1, 1))
        return ad.add(out, ad.reshape(self.bias, b.shape))

    def parameters(self):
        return [self.kernel, self.bias]


class Encoder(object):
    """Small convolutional encoder producing clamped diagonal-Gaussian params."""

    def __init__(self, image_shape, latent_dim, conv_channels=8, hidden=128, rng=None):
        rng = rng or np.random.default_rng(0)
        c, h, w = image_shape
        self.image_shape = image_shape
        ones1 = np.ones((conv_channels, c, 3, 3))
        ones2 = np.ones((conv_channels, conv_channels, 3, 3))
        self.conv1 = Conv(ones1, rng, name="enc.conv1")
        self.conv2 = Conv(ones2, rng, name="enc.conv2")
        self.fc = Dense(conv_channels * h * w, hidden, rng, name="enc.fc")
        # zero-init heads: a fresh encoder reports mu = 0, log-std = 0
        self.mu_head = Dense(hidden, latent_dim, rng, zero=True, name="enc.mu")
        self.logstd_head = Dense(hidden, latent_dim, rng, zero=True, name="enc.logstd")

    def __call__(self, x: Tensor):
        if x.data.shape[1:] != self.image_shape:
            raise ad.DomainError(
                f"encoder expects {self.image_shape} images, got {x.shape}")
        h = ad.elu(self.conv1(x))
        h = ad.elu(self.conv2(h))
        b = x.shape[0]
        h = ad.elu(self.fc(ad.reshape(h, (b, -1))))
        mu = self.mu_head(h)
        logstd = ad.clip(self.logstd_head(h), LOGSTD_MIN, LOGSTD_MAX)
        return mu, logstd

    def parameters(self):
        return (self.conv1.parameters() + self.conv2.parameters()
                + self.fc.parameters() + self.mu_head.parameters()
                + self.logstd_head.parameters())


# ---------------------------------------------------------------------------
# decoders


class _DecoderBase(object):
    image_shape: tuple
    latent_dim: int | None

    def __init__(self):
        self.clamp_events = 0

    def _promote(self, x, z):
        squeeze = isinstance(x, Tensor) and x.data.ndim == 3
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        if z is not None and z.data.ndim == 1:
            z = ad.reshape(z, (1,) + z.shape)
        return x, z, squeeze

    def probe_latent(self, rng):
        if self.latent_dim is None:
            return None
        return Tensor(rng.standard_normal((1, self.latent_dim)))

    def decode_logprob(self, x, z) -> Tensor:
        """Per-image log p(x | z) in nats; x must be binary."""
        logits = self.logits(x, z)
        if logits.data.ndim == 3:
            logits = ad.reshape(logits, (1,) + logits.shape)
            xd = x.data[None]
        else:
            xd = x.data
        p = ad.sigmoid(logits)
        below = int(np.sum(p.data < PROB_CLAMP))
        above = int(np.sum(p.data > 1.0 - PROB_CLAMP))
        self.clamp_events += below + above
        p = ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
        ll = ad.add(ad.mul(Tensor(xd), ad.log(p)),
                    ad.mul(Tensor(1.0 - xd), ad.log(ad.sub(Tensor(np.array(1.0)), p))))
        return ad.reduce_sum(ll, axes=(1, 2, 3))

    def sample(self, z, rng, instrument=False):
        """Ancestral raster-order sampling; z is (B, D) ndarray or None.

        With ``instrument`` set, each pixel's logits are recomputed with the
        raster future filled with noise and must be bit-identical, which
        certifies that sampling never reads a not-yet-generated pixel.
        """
        c, h, w = self.image_shape
        n = 1 if z is None else np.asarray(z).shape[0]
        zt = None if z is None else Tensor(np.asarray(z, dtype=np.float64))
        x = np.zeros((n, c, h, w))
        for r in range(h):
            for col in range(w):
                logits = self.logits(Tensor(x), zt).data
                if instrument:
                    probe = x.copy()
                    future = np.zeros((h, w), dtype=bool)
                    future[r, col:] = True
                    future[r + 1:, :] = True
                    noise = rng.random((n, c, h, w)) > 0.5
                    probe[:, :, future] = noise[:, :, future]
                    alt = self.logits(Tensor(probe), zt).data
                    if not np.array_equal(alt[:, :, r, col], logits[:, :, r, col]):
                        raise AssertionError(
                            f"sampler read a future pixel while generating ({r}, {col})")
                p = 1.0 / (1.0 + np.exp(-logits[:, :, r, col]))
                x[:, :, r, col] = (rng.random((n, c)) < p).astype(np.float64)
        return x


class FactorizedDecoder(_DecoderBase):
    """Fully factorized Bernoulli head: every pixel depends on z alone."""

    def __init__(self, image_shape, latent_dim, hidden=128, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.image_shape = image_shape
        self.latent_dim = latent_dim
        c, h, w = image_shape
        self.fc = Dense(latent_dim, hidden, rng, name="dec.fc")
        self.head = Dense(hidden, c * h * w, rng, zero=True, name="dec.head")

    def logits(self, x, z) -> Tensor:
        x, z, squeeze = self._promote(x, z)
        b = x.shape[0]
        out = self.head(ad.elu(self.fc(z)))
        out = ad.reshape(out, (b,) + self.image_shape)
        return ad.reshape(out, self.image_shape) if squeeze else out

    def predicted_field(self) -> ReceptiveField:
        return ReceptiveField(frozenset())

    def parameters(self):
        return self.fc.parameters() + self.head.parameters()

    def sample(self, z, rng, instrument=False):
        # no pixel interdependence: one parallel Bernoulli draw
        zt = Tensor(np.asarray(z, dtype=np.float64))
        logits = self.logits(Tensor(np.zeros((zt.shape[0],) + self.image_shape)), zt)
        p = 1.0 / (1.0 + np.exp(-logits.data))
        return (rng.random(p.shape) < p).astype(np.float64)


class LocalARDecoder(_DecoderBase):
    """Windowed PixelCNN decoder: each pixel reads z plus a small raster-past patch.

    The conditioning path projects z to a few spatial channels that are
    concatenated with the image before the masked stack; those channels are
    fully visible at every tap since they carry no pixel content. With
    ``latent_dim=None`` the same stack is an unconditional density estimator.
    """

    gray_input = False

    def __init__(self, image_shape, latent_dim, n_layers=6, filters=12, ksize=3,
                 cond_channels=4, tied=False, residual=False, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.image_shape = image_shape
        self.latent_dim = latent_dim
        self.n_layers = n_layers
        self.ksize = ksize
        c, h, w = image_shape
        ar_channels = 1 if self.gray_input else c

        cc = cond_channels if latent_dim is not None else 0
        if latent_dim is not None:
            self.cond_fc = Dense(latent_dim, 64, rng, name="dec.cond.fc")
            self.cond_map = Dense(64, cc * h * w, rng, name="dec.cond.map")
        self.cond_channels = cc

        first = ConvMask("A", ksize, ksize, c_in=ar_channels + cc, c_out=filters,
                         full_channels=tuple(range(ar_channels, ar_channels + cc)))
        self.layers = [Conv(first.tensor(), rng, name="dec.m0")]
        self._chain = [first]
        tied_kernel = None
        for li in range(1, n_layers):
            spec = ConvMask("B", ksize, ksize, c_in=filters, c_out=filters)
            layer = Conv(spec.tensor(), rng, name=f"dec.m{li}", kernel=tied_kernel)
            if tied and tied_kernel is None:
                tied_kernel = layer.kernel
            self.layers.append(layer)
            self._chain.append(spec)
        self.res_blocks = []
        if residual:
            for ri in range(2):
                spec = ConvMask("B", 1, 1, c_in=filters, c_out=filters)
                self.res_blocks.append(
                    (Conv(spec.tensor(), rng, name=f"dec.r{ri}a"),
                     Conv(spec.tensor(), rng, name=f"dec.r{ri}b")))
        head = ConvMask("B", 1, 1, c_in=filters, c_out=c)
        self.head = Conv(head.tensor(), rng, zero=True, name="dec.head")

    def _ar_stream(self, x: Tensor) -> Tensor:
        return x

    def _conditioning(self, b, z):
        c, h, w = self.image_shape
        m = self.cond_map(ad.elu(self.cond_fc(z)))
        return ad.reshape(m, (b, self.cond_channels, h, w))

    def logits(self, x, z) -> Tensor:
        x, z, squeeze = self._promote(x, z)
        b = x.shape[0]
        stream = self._ar_stream(x)
        if self.latent_dim is not None:
            if z is None:
                raise ad.DomainError("decoder is conditional but z is missing")
            stream = ad.concat([stream, self._conditioning(b, z)], axis=1)
        h = stream
        for li, layer in enumerate(self.layers):
            h = ad.elu(layer(h))
            if self.res_blocks and li in (1, 3) and li < self.n_layers - 1:
                blk = self.res_blocks[0 if li == 1 else 1]
                h = ad.add(h, blk[1](ad.elu(blk[0](h))))
        out = self.head(h)
        return ad.reshape(out, self.image_shape) if squeeze else out

    def predicted_field(self) -> ReceptiveField:
        return ReceptiveField(offsets_of_chain(self._chain))

    def parameters(self):
        params = []
        if self.latent_dim is not None:
            params += self.cond_fc.parameters() + self.cond_map.parameters()
        seen = set()
        for layer in self.layers:
            for p in layer.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        for a, b in self.res_blocks:
            params += a.parameters() + b.parameters()
        return params + self.head.parameters()


class GrayscaleLocalARDecoder(LocalARDecoder):
    """Local-AR decoder whose window input is the luminance projection.

    The pixels being modeled keep their channels, but the autoregressive
    stream is Grayscale(x) for RGB inputs, so past pixels can influence the
    current one only through their luminance. Single-channel images pass
    through unchanged (the projection of a gray image is itself).
    """

    gray_input = True

    def _ar_stream(self, x: Tensor) -> Tensor:
        if self.image_shape[0] == 3:
            return grayscale(x)
        return x


class VHStackDecoder(_DecoderBase):
    """Vertical/horizontal-stack masked decoder with an exact AxB window.

    One branch of convolutions sees full rows strictly above the pixel (via a
    top-half kernel and a one-row down shift on the first layer); the other
    sees pixels to the left on the current row; the branches are summed
    before the nonlinearity. Unlike the plain masked stack, the resulting
    dependency window is an exact rectangle plus left run.
    """

    def __init__(self, image_shape, latent_dim, n_vertical=1, n_horizontal=2,
                 filters=12, cond_channels=4, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if n_horizontal < 1:
            raise ValueError("need at least one horizontal layer")
        self.image_shape = image_shape
        self.latent_dim = latent_dim
        self.n_vertical = n_vertical
        self.n_horizontal = n_horizontal
        c, h, w = image_shape

        cc = cond_channels if latent_dim is not None else 0
        if latent_dim is not None:
            self.cond_fc = Dense(latent_dim, 64, rng, name="vh.cond.fc")
            self.cond_map = Dense(64, cc * h * w, rng, name="vh.cond.map")
        self.cond_channels = cc

        top_half = np.zeros((3, 3))
        top_half[:2, :] = 1.0  # rows above and the center row; shifted down after
        vm = np.broadcast_to(top_half, (filters, c, 3, 3)).copy()
        self.v_layers = [Conv(vm, rng, name="vh.v0")]
        for vi in range(1, n_vertical):
            vmk = np.broadcast_to(top_half, (filters, filters, 3, 3)).copy()
            self.v_layers.append(Conv(vmk, rng, name=f"vh.v{vi}"))
        self.v_proj = Conv(np.ones((filters, filters, 1, 1)), rng, name="vh.vproj")

        h1 = ConvMask("A", 1, 3, c_in=c + cc, c_out=filters,
                      full_channels=tuple(range(c, c + cc)))
        self.h_layers = [Conv(h1.tensor(), rng, name="vh.h0")]
        for hi in range(1, n_horizontal):
            spec = ConvMask("B", 1, 3, c_in=filters, c_out=filters)
            self.h_layers.append(Conv(spec.tensor(), rng, name=f"vh.h{hi}"))
        self.head = Conv(build_head_mask(filters, c), rng, zero=True, name="vh.head")

    def _conditioning(self, b, z):
        c, h, w = self.image_shape
        m = self.cond_map(ad.elu(self.cond_fc(z)))
        return ad.reshape(m, (b, self.cond_channels, h, w))

    def logits(self, x, z) -> Tensor:
        x, z, squeeze = self._promote(x, z)
        b = x.shape[0]
        v = ad.shift_down(self.v_layers[0](x), 1)
        for layer in self.v_layers[1:]:
            v = layer(ad.elu(v))
        hin = x
        if self.latent_dim is not None:
            if z is None:
                raise ad.DomainError("decoder is conditional but z is missing")
            hin = ad.concat([x, self._conditioning(b, z)], axis=1)
        s = ad.elu(ad.add(self.h_layers[0](hin), self.v_proj(ad.elu(v))))
        for layer in self.h_layers[1:]:
            s = ad.elu(layer(s))
        out = self.head(s)
        return ad.reshape(out, self.image_shape) if squeeze else out

    def predicted_field(self) -> ReceptiveField:
        v = {(dr - 1, dc) for dr in (-1, 0) for dc in (-1, 0, 1)}  # first layer + shift
        step = {(dr, dc) for dr in (-1, 0) for dc in (-1, 0, 1)}
        for _ in range(self.n_vertical - 1):
            v = {(a + c, b + d) for a, b in v for c, d in step}
        s = v | {(0, -1)}
        for _ in range(self.n_horizontal - 1):
            s = {(a, b + d) for a, b in s for d in (-1, 0)}
        return ReceptiveField(frozenset(s))

    def parameters(self):
        params = []
        if self.latent_dim is not None:
            params += self.cond_fc.parameters() + self.cond_map.parameters()
        for layer in self.v_layers + [self.v_proj] + self.h_layers + [self.head]:
            params += layer.parameters()
        return params


def build_head_mask(c_in, c_out):
    return np.ones((c_out, c_in, 1, 1))


def build_decoder(kind, image_shape, latent_dim, rng=None, **kwargs):
    if kind == "factorized":
        return FactorizedDecoder(image_shape, latent_dim, rng=rng)
    if kind == "local-ar":
        return LocalARDecoder(image_shape, latent_dim, rng=rng, **kwargs)
    if kind == "grayscale-local-ar":
        return GrayscaleLocalARDecoder(image_shape, latent_dim, rng=rng, **kwargs)
    if kind == "vh-stack":
        return VHStackDecoder(image_shape, latent_dim, rng=rng, **kwargs)
    raise ValueError(f"unknown decoder kind {kind!r}")


class UnconditionalAR(object):
    """A windowed autoregressive density estimator with no latent code.

    Shares the training/eval surface of the full model: the posterior and
    prior collapse, every KL term is exactly zero, and the importance-
    sampled NLL is exact for any sample count.
    """

    decoder_kind = "unconditional"

    def __init__(self, image_shape, n_layers=6, filters=12, ksize=3, seed=0,
                 decoder_cls=LocalARDecoder):
        rng = np.random.default_rng(seed)
        self.image_shape = tuple(image_shape)
        self.latent_dim = None
        self.decoder = decoder_cls(self.image_shape, None, n_layers=n_layers,
                                   filters=filters, ksize=ksize, rng=rng)

    def forward_terms(self, x, rng):
        x = np.asarray(x, dtype=np.float64)
        xt = Tensor(x)
        recon = self.decoder.decode_logprob(xt, None)
        zero = Tensor(np.zeros(x.shape[0]))
        return {"x": xt, "z": None, "recon": recon,
                "kl_terms": Tensor(np.zeros((x.shape[0], 1))),
                "kl": zero, "log_q": zero}

    def surrogate_objective(self, terms, state) -> Tensor:
        return ad.neg(ad.reduce_mean(terms["recon"], axes=0))

    def parameters(self):
        return self.decoder.parameters()

    def train_step(self, x, optimizer, state, rng, polyak_alpha=0.998,
                   debug_equivalence=False) -> dict:
        optimizer.zero_grad()
        terms = self.forward_terms(x, rng)
        loss = self.surrogate_objective(terms, state)
        if not np.isfinite(loss.item()):
            raise ad.NumericError("non-finite training loss; step aborted")
        ad.backward(loss)
        gnorm = optimizer.grad_norm()
        optimizer.step()
        for p in self.parameters():
            p.polyak_update(polyak_alpha)
        recon = float(np.mean(terms["recon"].data))
        return {"loss": float(loss.item()), "recon": recon, "kl": 0.0,
                "elbo": recon, "gamma": state.gamma, "grad_norm": gnorm}

    def generate(self, rng, n, instrument=False):
        c, h, w = self.image_shape
        out = []
        for _ in range(n):
            out.append(self.decoder.sample(None, rng, instrument=instrument)[0])
        return np.stack(out)

    def named_parameters(self):
        return VLAE.named_parameters(self)

    def state_arrays(self, polyak=False):
        return VLAE.state_arrays(self, polyak=polyak)

    def load_state_arrays(self, blobs, polyak_blobs=None):
        VLAE.load_state_arrays(self, blobs, polyak_blobs)

    def use_polyak(self):
        return VLAE.use_polyak(self)

    def restore(self, saved):
        VLAE.restore(self, saved)


# ---------------------------------------------------------------------------
# objectives


@dataclass
class ElboBreakdown:
    """Per-batch sample estimates, all in nats per image."""

    recon: float
    kl: float
    elbo: float
    objective: float
    gamma: float
    lam: float


@dataclass
class FreeBitsState:
    """Surrogate-objective state.

    Hard mode reserves at least ``lam`` nats per latent dimension via a
    per-group maximum; soft mode scales the total KL by an adaptive weight
    ``gamma`` that a slow controller nudges by exact 10% factors.
    """

    mode: str = "none"  # none | hard | soft
    lam: float = 0.0  # hard: nats per group; soft: total target nats
    gamma: float = 1.0
    threshold: float = 0.05
    step_factor: float = 1.1
    gamma_floor: float = 1e-4
    update_every: int = 20  # controller cadence; per-step moves over-steer
    ema_kl: float = 0.0
    ema_decay: float = 0.99
    ema_steps: int = 0
    gamma_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError("gamma must be in (0, 1]")


def update_gamma(state: FreeBitsState, observed_mean_kl: float, lam_total: float) -> float:
    """One controller tick; at most one +/-10% move per training step."""
    g = state.gamma
    if observed_mean_kl > lam_total * (1.0 + state.threshold):
        g = min(1.0, g * state.step_factor)
    elif observed_mean_kl < lam_total:
        g = g / state.step_factor
    g = min(1.0, max(state.gamma_floor, g))
    if g != state.gamma:
        state.gamma_history.append((state.gamma, g))
    state.gamma = g
    return g


# ---------------------------------------------------------------------------
# the assembled model


class VLAE(object):
    """Encoder -> diagonal Gaussian posterior -> flowed prior -> decoder."""

    def __init__(self, image_shape, latent_dim, decoder_kind="local-ar",
                 flow_steps=4, flow_mode="mean-only", flow_hidden=(64,),
                 encoder_hidden=128, seed=0, decoder_kwargs=None):
        rng = np.random.default_rng(seed)
        self.image_shape = tuple(image_shape)
        self.latent_dim = latent_dim
        self.decoder_kind = decoder_kind
        self.encoder = Encoder(self.image_shape, latent_dim,
                               hidden=encoder_hidden, rng=rng)
        self.flow = FlowStack(latent_dim, n_steps=flow_steps, mode=flow_mode,
                              hidden=tuple(flow_hidden), rng=rng)
        self.decoder = build_decoder(decoder_kind, self.image_shape, latent_dim,
                                     rng=rng, **(decoder_kwargs or {}))

    # --- inference pieces -------------------------------------------------

    def encode(self, x):
        xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        return self.encoder(xt)

    @staticmethod
    def sample_posterior(params, rng):
        """Reparameterized draw; returns (z, per-dim log q(z|x) terms, eta)."""
        mu, logstd = params
        eta = rng.standard_normal(mu.shape)
        z = ad.add(mu, ad.mul(ad.exp(logstd), Tensor(eta)))
        log_q_terms = ad.sub(Tensor(-0.5 * LN_2PI - 0.5 * eta ** 2), logstd)
        return z, log_q_terms, eta

    def forward_terms(self, x, rng):
        """Single-sample graph pieces shared by ELBO, surrogates and eval."""
        x = np.asarray(x, dtype=np.float64)
        xt = Tensor(x)
        params = self.encoder(xt)
        z, log_q_terms, _ = self.sample_posterior(params, rng)
        log_p_terms = self.flow.log_prior_terms(z)
        kl_terms = ad.sub(log_q_terms, log_p_terms)  # (B, D)
        recon = self.decoder.decode_logprob(xt, z)  # (B,)
        return {"x": xt, "z": z, "params": params, "recon": recon,
                "kl_terms": kl_terms,
                "kl": ad.reduce_sum(kl_terms, axes=-1),
                "log_q": ad.reduce_sum(log_q_terms, axes=-1)}

    def elbo(self, x, rng, state: FreeBitsState | None = None) -> ElboBreakdown:
        state = state or FreeBitsState()
        terms = self.forward_terms(x, rng)
        loss = self.surrogate_objective(terms, state)
        recon = float(np.mean(terms["recon"].data))
        kl = float(np.mean(terms["kl"].data))
        return ElboBreakdown(recon=recon, kl=kl, elbo=recon - kl,
                             objective=-float(loss.item()),
                             gamma=state.gamma, lam=state.lam)

    def surrogate_objective(self, terms, state: FreeBitsState) -> Tensor:
        """Scalar minimization loss (negated surrogate bound)."""
        recon = ad.reduce_mean(terms["recon"], axes=0)
        if state.mode == "hard":
            group_kl = ad.reduce_mean(terms["kl_terms"], axes=0)  # (D,)
            reserved = ad.reduce_sum(ad.maximum_const(group_kl, state.lam))
            return ad.neg(ad.sub(recon, reserved))
        if state.mode == "soft":
            kl = ad.reduce_mean(terms["kl"], axes=0)
            return ad.neg(ad.sub(recon, ad.scale(kl, state.gamma)))
        return ad.neg(ad.sub(recon, ad.reduce_mean(terms["kl"], axes=0)))

    # --- training ---------------------------------------------------------

    def parameters(self):
        return (self.encoder.parameters() + self.flow.parameters()
                + self.decoder.parameters())

    def train_step(self, x, optimizer, state: FreeBitsState, rng,
                   polyak_alpha=0.998, debug_equivalence=False) -> dict:
        optimizer.zero_grad()
        terms = self.forward_terms(x, rng)
        loss = self.surrogate_objective(terms, state)
        if not np.isfinite(loss.item()):
            raise ad.NumericError("non-finite training loss; step aborted")
        ad.backward(loss)
        gnorm = optimizer.grad_norm()
        optimizer.step()
        for p in self.parameters():
            p.polyak_update(polyak_alpha)

        batch_kl = float(np.mean(terms["kl"].data))
        state.ema_steps += 1
        if state.ema_steps == 1:
            state.ema_kl = batch_kl
        else:
            state.ema_kl = state.ema_decay * state.ema_kl + (1 - state.ema_decay) * batch_kl
        if state.mode == "soft" and state.ema_steps % state.update_every == 0:
            update_gamma(state, state.ema_kl, state.lam)

        if debug_equivalence:
            err = self.check_equivalence(terms)
            if err > 1e-8:
                raise AssertionError(f"prior/posterior route mismatch: {err:.3e}")

        recon = float(np.mean(terms["recon"].data))
        return {"loss": float(loss.item()), "recon": recon, "kl": batch_kl,
                "elbo": recon - batch_kl, "gamma": state.gamma, "grad_norm": gnorm}

    def check_equivalence(self, terms) -> float:
        """Max abs gap between the two groupings of the flowed-prior bound."""
        z = terms["z"].data

        def decode(zt):
            return self.decoder.decode_logprob(terms["x"], zt)

        a, b = elbo_equivalence(self.flow, z, terms["log_q"].data, decode)
        return float(np.max(np.abs(a - b)))

    # --- generation -------------------------------------------------------

    def generate(self, rng, n, instrument=False):
        eps = rng.standard_normal((n, self.latent_dim))
        z, _ = self.flow.forward_np(eps)
        return self.decoder.sample(z, rng, instrument=instrument)

    def reconstruct_lossy(self, x, rng, instrument=False):
        x = np.asarray(x, dtype=np.float64)
        params = self.encode(x)
        z, _, _ = self.sample_posterior(params, rng)
        return self.decoder.sample(z.data, rng, instrument=instrument)

    # --- persistence ------------------------------------------------------

    def named_parameters(self):
        out = []
        counts: dict = {}
        for p in self.parameters():
            base = getattr(p, "name", "") or "param"
            idx = counts.get(base, 0)
            counts[base] = idx + 1
            out.append((f"{base}" if idx == 0 else f"{base}#{idx}", p))
        return out

    def state_arrays(self, polyak=False) -> dict:
        return {name: (p.shadow if polyak else p.data).copy()
                for name, p in self.named_parameters()}

    def load_state_arrays(self, blobs: dict, polyak_blobs: dict | None = None) -> None:
        for name, p in self.named_parameters():
            arr = np.asarray(blobs[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}: "
                                 f"{arr.shape} vs {p.data.shape}")
            p.data[...] = arr
            if polyak_blobs is not None:
                p.shadow[...] = np.asarray(polyak_blobs[name], dtype=np.float64)
            else:
                p.shadow = p.data.copy()

    def use_polyak(self) -> dict:
        """Swap Polyak shadows into the live values; returns the originals."""
        saved = {name: p.data.copy() for name, p in self.named_parameters()}
        for _, p in self.named_parameters():
            p.data[...] = p.shadow
        return saved

    def restore(self, saved: dict) -> None:
        for name, p in self.named_parameters():
            p.data[...] = saved[name]
