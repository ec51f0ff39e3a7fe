"""Flow-prior tests: identity at init, invertibility, exact log-determinants
(checked against a dense numeric Jacobian), normalization by quadrature, and
the two-route equivalence of the flowed-prior bound.
"""

import numpy as np
import pytest

from vlae import autodiff as ad
from vlae.flows import (
    LN_2PI,
    FlowStack,
    FlowStep,
    Made,
    elbo_equivalence,
    identity_stack,
    log_noise_density,
)

RNG = np.random.default_rng(99)


def _randomize(stack, scale=0.5, seed=0):
    """Give every parameter (zero-init heads included) nontrivial values."""
    rng = np.random.default_rng(seed)
    for p in stack.parameters():
        p.data += scale * rng.standard_normal(p.data.shape)
    return stack


class TestMade:
    def test_zero_init_heads_are_identity(self):
        made = Made(5, (16,), n_heads=2, rng=np.random.default_rng(0))
        z = RNG.normal(size=(3, 5))
        mu, s = made.forward_np(z)
        assert np.all(mu == 0.0) and np.all(s == 0.0)

    def test_graph_and_numpy_paths_agree(self):
        made = Made(4, (12, 12), rng=np.random.default_rng(1))
        for p in made.parameters():
            p.data += 0.3 * RNG.standard_normal(p.data.shape)
        z = RNG.normal(size=(2, 4))
        graph = made.forward(ad.Tensor(z))[0].data
        assert np.allclose(graph, made.forward_np(z)[0], atol=1e-12)

    def test_autoregressive_jacobian(self):
        made = Made(5, (20,), rng=np.random.default_rng(2))
        for p in made.parameters():
            p.data += 0.5 * RNG.standard_normal(p.data.shape)
        z0 = RNG.normal(size=(1, 5))
        base = made.forward_np(z0)[0]
        for j in range(5):
            bumped = z0.copy()
            bumped[0, j] += 0.1
            diff = made.forward_np(bumped)[0] - base
            # output i responds to input j only when j precedes i
            for i in range(5):
                if j >= i:
                    assert diff[0, i] == 0.0


class TestFlowStep:
    def test_fresh_step_is_identity(self):
        for mode in ("mean-only", "affine"):
            step = FlowStep(6, hidden=(16,), mode=mode, rng=np.random.default_rng(0))
            z = RNG.normal(size=(4, 6))
            eps, logdet = step.inverse(ad.Tensor(z))
            assert np.allclose(eps.data, z, atol=1e-9)
            assert np.allclose(logdet.data, 0.0, atol=1e-9)

    def test_mean_only_logdet_is_exactly_zero(self):
        step = FlowStep(6, hidden=(16,), mode="mean-only", rng=np.random.default_rng(1))
        for p in step.parameters():
            p.data += RNG.standard_normal(p.data.shape)
        _, logdet = step.inverse(ad.Tensor(RNG.normal(size=(3, 6))))
        assert np.all(logdet.data == 0.0)

    def test_round_trip(self):
        for mode, tol in (("mean-only", 1e-10), ("affine", 1e-8)):
            step = FlowStep(8, hidden=(16,), mode=mode, rng=np.random.default_rng(2))
            for p in step.parameters():
                p.data += 0.4 * RNG.standard_normal(p.data.shape)
            eps = RNG.normal(size=(5, 8))
            z, _ = step.forward_np(eps)
            back, _ = step.inverse(ad.Tensor(z))
            assert np.max(np.abs(back.data - eps)) < tol

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError):
            FlowStep(4, mode="quadratic")


class TestFlowStack:
    def test_round_trip_mean_only_d32(self):
        stack = _randomize(FlowStack(32, n_steps=4, hidden=(32,), mode="mean-only",
                                     rng=np.random.default_rng(3)), seed=3)
        z = RNG.normal(size=(16, 32))
        eps, _ = stack.inverse(ad.Tensor(z))
        z2, _ = stack.forward_np(eps.data)
        assert np.max(np.abs(z2 - z)) < 1e-6

    def test_round_trip_affine(self):
        stack = _randomize(FlowStack(8, n_steps=3, hidden=(16,), mode="affine",
                                     rng=np.random.default_rng(4)), scale=0.3, seed=4)
        z = RNG.normal(size=(8, 8))
        eps, _ = stack.inverse(ad.Tensor(z))
        z2, _ = stack.forward_np(eps.data)
        assert np.max(np.abs(z2 - z)) < 1e-5

    def test_logdet_antisymmetry(self):
        """Forward and inverse per-sample log-dets cancel to round-off."""
        stack = _randomize(FlowStack(6, n_steps=3, hidden=(16,), mode="affine",
                                     rng=np.random.default_rng(5)), scale=0.3, seed=5)
        eps = RNG.normal(size=(10, 6))
        z, fwd_ld = stack.forward_np(eps)
        _, inv_ld = stack.inverse(ad.Tensor(z))
        total = fwd_ld.sum(axis=-1) + inv_ld.data.sum(axis=-1)
        assert np.max(np.abs(total)) < 1e-8

    def test_logdet_matches_dense_jacobian(self):
        """Numeric-Jacobian oracle for the inverse map's log-determinant, D=4."""
        stack = _randomize(FlowStack(4, n_steps=2, hidden=(12,), mode="affine",
                                     rng=np.random.default_rng(6)), scale=0.4, seed=6)
        z0 = RNG.normal(size=4)
        _, logdet = stack.inverse(ad.Tensor(z0[None]))
        claimed = float(logdet.data.sum())

        eps_fd = 1e-6
        jac = np.zeros((4, 4))
        for j in range(4):
            hi, lo = z0.copy(), z0.copy()
            hi[j] += eps_fd
            lo[j] -= eps_fd
            e_hi, _ = stack.inverse(ad.Tensor(hi[None]))
            e_lo, _ = stack.inverse(ad.Tensor(lo[None]))
            jac[:, j] = (e_hi.data[0] - e_lo.data[0]) / (2 * eps_fd)
        sign, numeric = np.linalg.slogdet(jac)
        assert sign == 1.0
        assert abs(claimed - numeric) < 1e-5

    def test_identity_stack_is_standard_normal(self):
        stack = identity_stack(5)
        z = RNG.normal(size=(7, 5))
        lp = stack.log_prior(ad.Tensor(z)).data
        expected = -0.5 * 5 * LN_2PI - 0.5 * np.sum(z ** 2, axis=-1)
        assert np.allclose(lp, expected, atol=1e-12)
        assert np.allclose(log_noise_density(z), expected)

    def test_alternating_orderings(self):
        stack = FlowStack(4, n_steps=2, hidden=(8,), rng=np.random.default_rng(7))
        assert np.array_equal(stack.steps[0].conditioner.ordering, [1, 2, 3, 4])
        assert np.array_equal(stack.steps[1].conditioner.ordering, [4, 3, 2, 1])

    def test_density_normalizes_by_quadrature(self):
        """Integrate exp(log p) on a grid over R^2; mass must be ~1."""
        stack = _randomize(FlowStack(2, n_steps=2, hidden=(12,), mode="affine",
                                     rng=np.random.default_rng(8)), scale=0.4, seed=8)
        grid = np.linspace(-9.0, 9.0, 301)
        dx = grid[1] - grid[0]
        zz = np.stack(np.meshgrid(grid, grid, indexing="ij"), axis=-1).reshape(-1, 2)
        mass = 0.0
        for start in range(0, zz.shape[0], 8192):
            lp = stack.log_prior(ad.Tensor(zz[start:start + 8192])).data
            mass += float(np.sum(np.exp(lp))) * dx * dx
        assert abs(mass - 1.0) < 1e-2


class TestEquivalence:
    def test_two_routes_agree(self):
        """The flowed-prior bound equals its whitened-posterior regrouping."""
        for mode, tol in (("mean-only", 1e-10), ("affine", 1e-8)):
            stack = _randomize(FlowStack(6, n_steps=3, hidden=(16,), mode=mode,
                                         rng=np.random.default_rng(9)),
                               scale=0.3, seed=9)
            proj = RNG.normal(size=6)

            def decode(zt):  # stand-in likelihood, smooth in z
                return ad.neg(ad.reduce_sum(ad.mul(ad.mul(zt, zt),
                                                   ad.Tensor(0.1 * np.abs(proj))),
                                            axes=-1))

            z = RNG.normal(size=(100, 6))
            log_q = RNG.normal(size=100)
            a, b = elbo_equivalence(stack, z, log_q, decode)
            # randomized affine weights can inflate |bound| to ~1e6, so gate
            # on the relative gap; at moderate magnitudes this equals the
            # absolute one
            assert np.max(np.abs(a - b) / (1.0 + np.abs(a))) < tol
