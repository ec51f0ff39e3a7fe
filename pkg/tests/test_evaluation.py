"""Estimator tests: the importance-sampled NLL, bits-back accounting
identities, unit conversions, and the enumeration oracle's guards.
"""

import numpy as np
import pytest

from vlae import evaluation as ev
from vlae.model import VLAE, FreeBitsState, UnconditionalAR
from vlae.optim import make_optimizer


def toy_model(seed=0):
    return VLAE((1, 4, 4), 3, decoder_kind="local-ar", flow_steps=1,
                flow_hidden=(8,), encoder_hidden=16, seed=seed,
                decoder_kwargs={"n_layers": 2, "filters": 4, "ksize": 3,
                                "cond_channels": 2})


def toy_batch(n=16, seed=1):
    return (np.random.default_rng(seed).random((n, 1, 4, 4)) < 0.5).astype(float)


def trained_model(steps=80):
    model = toy_model(seed=3)
    opt = make_optimizer("adamax", model.parameters(), 0.01)
    state = FreeBitsState()
    rng = np.random.default_rng(4)
    x = toy_batch(32, seed=5)
    for _ in range(steps):
        model.train_step(x, opt, state, rng)
    return model


class TestConversions:
    def test_round_trip(self):
        assert np.isclose(ev.bits_to_nats(ev.nats_to_bits(3.7)), 3.7)

    def test_paper_headline_conversion(self):
        # 13.3 nats of latent information is 19.2 bits to one decimal
        assert round(ev.nats_to_bits(13.3), 1) == 19.2

    def test_bits_per_dim(self):
        assert np.isclose(ev.bits_per_dim(np.log(2.0) * 784, 784), 1.0)
        with pytest.raises(ValueError):
            ev.bits_per_dim(1.0, 0)


class TestBitsBack:
    def test_bitsback_equals_negative_elbo(self):
        """The refunded code length is the negative bound, to round-off."""
        model = toy_model()
        x = toy_batch()
        report = ev.bitsback_accounting(model, x, np.random.default_rng(9))
        terms = model.forward_terms(x, np.random.default_rng(9))
        elbo = terms["recon"].data - terms["kl"].data
        assert abs(report.bitsback_len - float(-np.mean(elbo))) < 1e-10
        assert np.allclose(report.per_image_bitsback, -elbo, atol=1e-10)

    def test_savings_is_posterior_entropy_term(self):
        model = toy_model()
        x = toy_batch()
        report = ev.bitsback_accounting(model, x, np.random.default_rng(9))
        terms = model.forward_terms(x, np.random.default_rng(9))
        assert abs(report.savings - float(-np.mean(terms["log_q"].data))) < 1e-10
        assert np.isclose(report.naive_len - report.bitsback_len, report.savings)

    def test_kl_usage_reported(self):
        model = toy_model()
        x = toy_batch()
        report = ev.bitsback_accounting(model, x, np.random.default_rng(9))
        usage = ev.kl_usage_meter(model, x, np.random.default_rng(9))
        assert abs(report.kl_usage - usage["nats"]) < 1e-10
        assert usage["decoder"] == "local-ar"
        assert np.isclose(usage["bits"], ev.nats_to_bits(usage["nats"]))

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            ev.bitsback_accounting(toy_model(), np.zeros((0, 1, 4, 4)),
                                   np.random.default_rng(0))


class TestIsNll:
    def test_k1_equals_negative_elbo(self):
        model = toy_model()
        x = toy_batch()
        est = ev.is_nll(model, x, 1, np.random.default_rng(21))
        terms = model.forward_terms(x, np.random.default_rng(21))
        elbo = float(np.mean(terms["recon"].data - terms["kl"].data))
        assert abs(est.value + elbo) < 1e-10

    def test_zero_variance_weights_have_zero_stderr(self):
        """An unconditional model's weights are deterministic, so k is moot."""
        model = UnconditionalAR((1, 3, 3), n_layers=2, filters=4, seed=0)
        x = toy_batch(8)[:, :, :3, :3]
        a = ev.is_nll(model, x, 16, np.random.default_rng(0))
        b = ev.is_nll(model, x, 1, np.random.default_rng(0))
        assert abs(a.value - b.value) < 1e-12
        assert a.std_error == 0.0

    def test_more_samples_tighten_the_bound(self):
        model = trained_model()
        x = toy_batch(64, seed=6)
        rng = np.random.default_rng(7)
        k1 = np.mean([ev.is_nll(model, x, 1, rng).value for _ in range(16)])
        k64 = ev.is_nll(model, x, 64, np.random.default_rng(8)).value
        assert k64 <= k1 + 1e-9

    def test_k_validation(self):
        with pytest.raises(ValueError):
            ev.is_nll(toy_model(), toy_batch(), 0, np.random.default_rng(0))


class TestEnumerationOracle:
    def test_rejects_large_state_spaces(self):
        with pytest.raises(ValueError, match="too large"):
            ev.enumerate_model_mass(None, None, (1, 4, 4))

    def test_unconditional_mass(self):
        model = UnconditionalAR((1, 3, 3), n_layers=2, filters=4, seed=1)
        rng = np.random.default_rng(2)
        for p in model.parameters():
            p.data += 0.5 * rng.standard_normal(p.data.shape)
        mass = ev.enumerate_model_mass(model.decoder, None, (1, 3, 3))
        assert abs(mass - 1.0) < 1e-6
