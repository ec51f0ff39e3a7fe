"""Model-level tests: posterior mechanics, objectives and the free-bits
controller, decoder normalization against the enumeration oracle, training
determinism, and sampler instrumentation.
"""

import numpy as np
import pytest

from vlae import autodiff as ad
from vlae.evaluation import enumerate_model_mass
from vlae.flows import LN_2PI
from vlae.model import (
    VLAE,
    FreeBitsState,
    UnconditionalAR,
    build_decoder,
    update_gamma,
)
from vlae.optim import make_optimizer

RNG = np.random.default_rng(31)


def small_model(decoder_kind="local-ar", seed=0, **overrides):
    kwargs = {"n_layers": 2, "filters": 5, "ksize": 3, "cond_channels": 2,
              "tied": False, "residual": False}
    if decoder_kind == "factorized":
        kwargs = {}
    return VLAE((1, 5, 5), 4, decoder_kind=decoder_kind, flow_steps=2,
                flow_mode=overrides.pop("flow_mode", "mean-only"),
                flow_hidden=(12,), encoder_hidden=16, seed=seed,
                decoder_kwargs=kwargs)


def batch(n=6, shape=(1, 5, 5), seed=1):
    return (np.random.default_rng(seed).random((n,) + shape) < 0.5).astype(float)


class TestPosterior:
    def test_fresh_encoder_reports_standard_normal(self):
        model = small_model()
        mu, logstd = model.encode(batch())
        assert np.all(mu.data == 0.0)
        assert np.all(logstd.data == 0.0)

    def test_log_q_formula(self):
        model = small_model()
        params = model.encode(batch())
        rng = np.random.default_rng(5)
        z, log_q_terms, eta = model.sample_posterior(params, rng)
        # at mu=0, logstd=0: z = eta and log q = standard normal density
        assert np.allclose(z.data, eta)
        expected = -0.5 * LN_2PI - 0.5 * eta ** 2
        assert np.allclose(log_q_terms.data, expected, atol=1e-12)

    def test_reparameterized_gradients_are_exact(self):
        """d z / d mu = 1 and d z / d logstd = eta * sigma, per coordinate."""
        mu = ad.Parameter(np.full((2, 3), 0.4))
        logstd = ad.Parameter(np.full((2, 3), -0.2))
        rng = np.random.default_rng(6)
        z, _, eta = VLAE.sample_posterior((mu, logstd), rng)
        ad.backward(ad.reduce_sum(z))
        assert np.allclose(mu.grad, 1.0)
        assert np.allclose(logstd.grad, eta * np.exp(-0.2), atol=1e-12)

    def test_mc_kl_matches_analytic_for_gaussian_prior(self):
        """With a zero-step flow the prior is N(0, I) and the KL is closed form."""
        model = VLAE((1, 5, 5), 4, decoder_kind="factorized", flow_steps=0,
                     encoder_hidden=16, seed=0)
        # give the posterior a nontrivial offset
        model.encoder.mu_head.b.data[:] = [0.5, -0.3, 0.8, 0.0]
        model.encoder.logstd_head.b.data[:] = [-0.4, 0.2, 0.0, -1.0]
        x = batch(4)
        mu, logstd = (t.data[0] for t in model.encode(x))
        analytic = float(np.sum(0.5 * (mu ** 2 + np.exp(2 * logstd)
                                       - 2 * logstd - 1.0)))
        rng = np.random.default_rng(7)
        draws = [np.mean(model.forward_terms(x, rng)["kl"].data)
                 for _ in range(4000)]
        assert abs(np.mean(draws) - analytic) / analytic < 0.02


class TestDecoders:
    @pytest.mark.parametrize("kind", ["factorized", "local-ar", "grayscale-local-ar"])
    def test_enumeration_mass_is_one(self, kind):
        """Chain-rule normalization over all 512 3x3 binary images."""
        for seed in range(3):
            dec = build_decoder(kind, (1, 3, 3), 3, np.random.default_rng(seed),
                                **({} if kind == "factorized" else
                                   {"n_layers": 2, "filters": 4, "ksize": 3,
                                    "cond_channels": 2}))
            for p in dec.parameters():
                p.data += 0.5 * np.random.default_rng(seed + 50).standard_normal(p.data.shape)
            z = np.random.default_rng(seed).standard_normal(3)
            mass = enumerate_model_mass(dec, z, (1, 3, 3))
            assert abs(mass - 1.0) < 1e-6, (kind, seed, mass)

    def test_sampler_instrumentation_clean_decoder(self):
        model = small_model(seed=2)
        out = model.generate(np.random.default_rng(3), 2, instrument=True)
        assert out.shape == (2, 1, 5, 5)
        assert set(np.unique(out)) <= {0.0, 1.0}

    def test_sampler_instrumentation_catches_leak(self):
        model = small_model(seed=2)
        model.decoder.layers[0].mask[:] = 1.0  # open the masked taps
        for p in model.decoder.parameters():
            p.data += 0.2 * RNG.standard_normal(p.data.shape)
        with pytest.raises(AssertionError, match="future"):
            model.generate(np.random.default_rng(3), 1, instrument=True)

    def test_clamp_events_counted(self):
        model = small_model(seed=0)
        model.decoder.head.bias.data[:] = 50.0  # saturate the Bernoulli head
        before = model.decoder.clamp_events
        model.decoder.decode_logprob(ad.Tensor(batch(2)), ad.Tensor(RNG.normal(size=(2, 4))))
        assert model.decoder.clamp_events > before

    def test_vh_stack_trains(self):
        model = VLAE((1, 5, 5), 3, decoder_kind="vh-stack", flow_steps=1,
                     flow_hidden=(8,), encoder_hidden=16, seed=0,
                     decoder_kwargs={"n_vertical": 1, "n_horizontal": 2,
                                     "filters": 4, "cond_channels": 2})
        opt = make_optimizer("adamax", model.parameters(), 0.002)
        state = FreeBitsState()
        m = model.train_step(batch(), opt, state, np.random.default_rng(0))
        assert np.isfinite(m["loss"])


class TestObjectives:
    def test_plain_surrogate_equals_negative_elbo(self):
        model = small_model()
        terms = model.forward_terms(batch(), np.random.default_rng(1))
        loss = model.surrogate_objective(terms, FreeBitsState(mode="none"))
        elbo = np.mean(terms["recon"].data) - np.mean(terms["kl"].data)
        assert np.isclose(loss.item(), -elbo, atol=1e-12)

    def test_hard_free_bits_reserves_lambda(self):
        model = small_model()
        terms = model.forward_terms(batch(), np.random.default_rng(1))
        lam = 0.5
        loss = model.surrogate_objective(terms, FreeBitsState(mode="hard", lam=lam))
        per_dim = np.mean(terms["kl_terms"].data, axis=0)
        expected = -(np.mean(terms["recon"].data)
                     - np.sum(np.maximum(per_dim, lam)))
        assert np.isclose(loss.item(), expected, atol=1e-12)
        # a fresh model's KL is ~0, so the reserved term is exactly D * lam
        assert np.isclose(loss.item(),
                          -np.mean(terms["recon"].data) + 4 * lam, atol=1e-6)

    def test_soft_free_bits_scales_kl(self):
        model = small_model()
        terms = model.forward_terms(batch(), np.random.default_rng(1))
        state = FreeBitsState(mode="soft", lam=1.0, gamma=0.25)
        loss = model.surrogate_objective(terms, state)
        expected = -(np.mean(terms["recon"].data) - 0.25 * np.mean(terms["kl"].data))
        assert np.isclose(loss.item(), expected, atol=1e-12)

    def test_elbo_breakdown(self):
        model = small_model()
        bd = model.elbo(batch(), np.random.default_rng(1))
        assert np.isclose(bd.elbo, bd.recon - bd.kl)


class TestGammaController:
    def test_kl_above_band_raises_gamma(self):
        state = FreeBitsState(mode="soft", lam=2.0, gamma=0.5)
        update_gamma(state, observed_mean_kl=2.5, lam_total=2.0)
        assert np.isclose(state.gamma, 0.55)
        assert state.gamma_history[-1] == (0.5, 0.55)

    def test_kl_below_lambda_lowers_gamma(self):
        state = FreeBitsState(mode="soft", lam=2.0, gamma=0.55)
        update_gamma(state, observed_mean_kl=1.0, lam_total=2.0)
        assert np.isclose(state.gamma, 0.5)

    def test_dead_band_leaves_gamma(self):
        state = FreeBitsState(mode="soft", lam=2.0, gamma=0.7)
        update_gamma(state, observed_mean_kl=2.05, lam_total=2.0)  # within 5%
        assert state.gamma == 0.7
        assert state.gamma_history == []

    def test_gamma_is_clamped(self):
        state = FreeBitsState(mode="soft", lam=1.0, gamma=0.99)
        update_gamma(state, observed_mean_kl=5.0, lam_total=1.0)
        assert state.gamma == 1.0
        state = FreeBitsState(mode="soft", lam=1.0, gamma=1e-4)
        update_gamma(state, observed_mean_kl=0.0, lam_total=1.0)
        assert state.gamma == 1e-4

    def test_invalid_state_rejected(self):
        with pytest.raises(ValueError):
            FreeBitsState(lam=-1.0)
        with pytest.raises(ValueError):
            FreeBitsState(gamma=0.0)


class TestTraining:
    def test_deterministic_given_seed(self):
        results = []
        for _ in range(2):
            model = small_model(seed=4)
            opt = make_optimizer("adamax", model.parameters(), 0.002)
            state = FreeBitsState(mode="soft", lam=0.5)
            rng = np.random.default_rng(11)
            x = batch(8)
            for _ in range(5):
                m = model.train_step(x, opt, state, rng)
            results.append((m["loss"], [p.data.copy() for p in model.parameters()]))
        assert results[0][0] == results[1][0]
        for a, b in zip(results[0][1], results[1][1]):
            assert np.array_equal(a, b)

    def test_loss_decreases_on_smoke_run(self):
        model = small_model(seed=5)
        opt = make_optimizer("adamax", model.parameters(), 0.01)
        state = FreeBitsState()
        rng = np.random.default_rng(12)
        x = batch(16)
        losses = [model.train_step(x, opt, state, rng)["loss"] for _ in range(60)]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_debug_equivalence_on_train_step(self):
        model = small_model(seed=6, flow_mode="affine")
        opt = make_optimizer("adam", model.parameters(), 0.002)
        state = FreeBitsState()
        m = model.train_step(batch(), opt, state, np.random.default_rng(0),
                             debug_equivalence=True)
        assert np.isfinite(m["loss"])

    def test_polyak_tracks_weights(self):
        model = small_model(seed=7)
        opt = make_optimizer("adamax", model.parameters(), 0.01)
        state = FreeBitsState()
        rng = np.random.default_rng(3)
        for _ in range(3):
            model.train_step(batch(), opt, state, rng, polyak_alpha=0.5)
        p = model.parameters()[0]
        assert not np.array_equal(p.shadow, p.data)
        saved = model.use_polyak()
        assert np.array_equal(model.parameters()[0].data, p.shadow)
        model.restore(saved)
        assert np.array_equal(model.parameters()[0].data, saved[model.named_parameters()[0][0]])


class TestUnconditional:
    def test_zero_kl_and_exact_nll(self):
        model = UnconditionalAR((1, 4, 4), n_layers=2, filters=4, seed=0)
        x = batch(5, (1, 4, 4))
        terms = model.forward_terms(x, np.random.default_rng(0))
        assert np.all(terms["kl"].data == 0.0)
        assert np.all(terms["log_q"].data == 0.0)

    def test_train_and_generate(self):
        model = UnconditionalAR((1, 4, 4), n_layers=2, filters=4, seed=0)
        opt = make_optimizer("adamax", model.parameters(), 0.01)
        state = FreeBitsState()
        rng = np.random.default_rng(1)
        x = batch(8, (1, 4, 4))
        losses = [model.train_step(x, opt, state, rng)["loss"] for _ in range(40)]
        assert losses[-1] < losses[0]
        out = model.generate(np.random.default_rng(2), 2, instrument=True)
        assert out.shape == (2, 1, 4, 4)


class TestPersistence:
    def test_state_round_trip(self):
        model = small_model(seed=8)
        for p in model.parameters():
            p.data += 0.1 * RNG.standard_normal(p.data.shape)
            p.polyak_update(0.5)
        blobs = model.state_arrays()
        shadows = model.state_arrays(polyak=True)
        clone = small_model(seed=9)
        clone.load_state_arrays(blobs, shadows)
        for (na, pa), (_, pb) in zip(model.named_parameters(), clone.named_parameters()):
            assert np.array_equal(pa.data, pb.data), na
            assert np.array_equal(pa.shadow, pb.shadow), na

    def test_shape_mismatch_rejected(self):
        model = small_model(seed=8)
        blobs = model.state_arrays()
        name0 = next(iter(blobs))
        blobs[name0] = np.zeros(3)
        with pytest.raises(ValueError, match="shape mismatch"):
            small_model(seed=9).load_state_arrays(blobs)
