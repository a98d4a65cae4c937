"""Lipschitz lab: operator norms, epsilon extraction, theorem bounds,
empirical Jacobian probes, and the FGSM/PGD attack contracts."""

import numpy as np
import pytest

from clisa.errors import ContractError
from clisa.layers import init_conv
from clisa.lipschitz import (
    EpsilonSet,
    circulant_embedding,
    combined_bound,
    conv_operator_norm,
    dosa_bound,
    dosa_epsilons,
    empirical_jacobian_diag_norm,
    epsilon_from_kernel,
    fgsm_attack,
    hc2a_bound,
    input_b_value,
    input_gradient,
    make_probe_module,
    matched_mst_blocks,
    pgd_attack,
    probe_module,
    _segmentation_loss,
)
from clisa.model import GeneratorConfig, GeneratorModel
from clisa.tensor import Tensor, no_grad


def explicit_circulant_matrix(k2d, H, W):
    """Dense HW x HW matrix of circular cross-correlation with k2d."""
    k = k2d.shape[0]
    half = k // 2
    M = np.zeros((H * W, H * W))
    for col in range(H * W):
        impulse = np.zeros((H, W))
        impulse[col // W, col % W] = 1.0
        out = np.zeros((H, W))
        for u in range(k):
            for v in range(k):
                out += k2d[u, v] * np.roll(np.roll(impulse, -(u - half), axis=0),
                                           -(v - half), axis=1)
        M[:, col] = out.reshape(-1)
    return M


class TestOperatorNorm:
    def test_delta_kernel_is_one(self):
        k = np.zeros((3, 3, 1, 1))
        k[1, 1, 0, 0] = 1.0
        assert conv_operator_norm(k, 8, 8) == pytest.approx(1.0)

    def test_zero_kernel(self):
        assert conv_operator_norm(np.zeros((3, 3, 1, 1)), 8, 8) == 0.0

    def test_matches_explicit_circulant_svd(self, rng):
        for _ in range(20):
            k = rng.normal(size=(3, 3, 1, 1))
            M = explicit_circulant_matrix(k[:, :, 0, 0], 8, 8)
            want = np.linalg.svd(M, compute_uv=False)[0]
            got = conv_operator_norm(k, 8, 8)
            assert got == pytest.approx(want, rel=1e-10)

    def test_multichannel_matches_stacked_circulant(self, rng):
        k = rng.normal(size=(3, 3, 2, 2))
        blocks = [[explicit_circulant_matrix(k[:, :, i, o], 8, 8) for i in range(2)]
                  for o in range(2)]
        M = np.block(blocks)
        want = np.linalg.svd(M, compute_uv=False)[0]
        assert conv_operator_norm(k, 8, 8) == pytest.approx(want, rel=1e-8)


class TestEpsilon:
    def test_zero_drift(self, rng):
        k = rng.normal(size=(3, 3))
        assert epsilon_from_kernel(k, k) == 0.0

    def test_real_result(self, rng):
        got = epsilon_from_kernel(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)))
        assert np.isreal(got) and np.isfinite(got)

    def test_matches_direct_complex_oracle(self, rng):
        w = rng.normal(size=(3, 3))
        w0 = rng.normal(size=(3, 3))
        gamma = w - w0
        # (1/9) (U^T Gamma U)_{0,0} with U the 3x3 DFT matrix column 0 = ones
        assert epsilon_from_kernel(w, w0) == pytest.approx(gamma.mean(), abs=1e-12)


class TestBounds:
    def test_dosa_frozen_value(self):
        """eps=0, B=1 -> 3 + (1 + sqrt(2))/2."""
        want = 3.0 + (1.0 + np.sqrt(2.0)) / 2.0
        assert dosa_bound(EpsilonSet(), 1.0) == pytest.approx(want, rel=1e-12)
        assert dosa_bound(EpsilonSet(), 1.0) == pytest.approx(4.2071, abs=1e-4)

    def test_dosa_zero_input(self):
        assert dosa_bound(EpsilonSet(), 0.0) == pytest.approx(3.0)

    def test_dosa_monotone_in_b(self, rng):
        bs = np.sort(rng.uniform(0, 5, size=10))
        vals = [dosa_bound(EpsilonSet(), b) for b in bs]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_dosa_negative_b_rejected(self):
        with pytest.raises(ContractError, match="B"):
            dosa_bound(EpsilonSet(), -1.0)

    def test_hc2a_frozen_value(self):
        assert hc2a_bound(EpsilonSet(), 0.0, 0.0) == pytest.approx(0.25, rel=1e-12)

    def test_combined_identity(self):
        assert combined_bound(1.0, 1.0) == 1.0

    def test_combined_b6_asymptote(self):
        """Combined bound grows as Theta(B^6): doubling large B gives x64."""
        def combined(B):
            return combined_bound(dosa_bound(EpsilonSet(), B),
                                  hc2a_bound(EpsilonSet(), B, B))

        B = 1e4
        ratio = combined(2 * B) / combined(B)
        assert ratio == pytest.approx(64.0, rel=0.05)

    def test_input_b_value(self):
        x = np.zeros((4, 4, 1))
        x[0, 0, 0] = -2.0
        assert input_b_value(x) == pytest.approx(4.0 * 2.0)


class TestEmpiricalProbe:
    def test_identity_module_is_one(self, rng):
        x = rng.uniform(-1, 1, size=(8, 8, 3))
        got = empirical_jacobian_diag_norm(lambda t: t, x, 1)
        assert got == pytest.approx(1.0, rel=1e-6)

    def test_pure_conv_matches_operator_norm(self, rng):
        """Probing a circularly padded conv reproduces the DFT operator norm.

        Wrapping one ring before a zero-padded same conv and cropping the
        center makes the layer exactly circular, matching the bound model.
        """
        p = init_conv(rng, 3, 3, 3)
        x = rng.uniform(-1, 1, size=(8, 8, 3))
        from clisa.layers import conv2d
        from clisa.tensor import concat

        def circ_conv(t):
            t2 = concat([t[-1:, :, :], t, t[:1, :, :]], axis=0)
            t2 = concat([t2[:, -1:, :], t2, t2[:, :1, :]], axis=1)
            return conv2d(t2, p)[1:-1, 1:-1, :]

        got = empirical_jacobian_diag_norm(circ_conv, x, 1)
        want = conv_operator_norm(p.kernel.data[:, :, 1:2, 1:2], 8, 8)
        assert got == pytest.approx(want, rel=1e-3)

    def test_zero_padded_conv_stays_below_circulant_norm(self, rng):
        p = init_conv(rng, 3, 3, 3)
        x = rng.uniform(-1, 1, size=(8, 8, 3))
        from clisa.layers import conv2d

        got = empirical_jacobian_diag_norm(lambda t: conv2d(t, p), x, 1)
        want = conv_operator_norm(p.kernel.data[:, :, 1:2, 1:2], 8, 8)
        assert got <= want * (1 + 1e-9)

    def test_random_init_dosa_below_bound(self):
        reports = probe_module("dosa", 8, [0, 5], seed=0, shape=(8, 8))
        for r in reports:
            assert r.empirical <= r.bound

    def test_matched_mst_blocks_counts(self):
        assert matched_mst_blocks(64) == 11
        assert matched_mst_blocks(4) >= 11


@pytest.fixture(scope="module")
def small_model():
    cfg = GeneratorConfig(in_channels=3, num_classes=2, base_channels=4,
                          depth=2, attention="dosa", dtype="f64")
    return GeneratorModel(cfg, seed=0)


class TestAttacks:
    def test_fgsm_zero_eps_identity(self, small_model, rng):
        x = rng.uniform(0, 1, size=(8, 8, 3))
        y = rng.integers(0, 2, size=(8, 8))
        np.testing.assert_array_equal(fgsm_attack(small_model, x, y, 0.0), x)

    def test_fgsm_linf_budget(self, small_model, rng):
        x = rng.uniform(0.2, 0.8, size=(8, 8, 3))
        y = rng.integers(0, 2, size=(8, 8))
        adv = fgsm_attack(small_model, x, y, 0.03)
        assert np.abs(adv - x).max() <= 0.03 + 1e-12
        assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_fgsm_increases_loss_mostly(self, small_model, rng):
        wins = 0
        for i in range(10):
            x = rng.uniform(0, 1, size=(8, 8, 3))
            y = rng.integers(0, 2, size=(8, 8))
            with no_grad():
                clean = float(_segmentation_loss(small_model, Tensor(x), y).data)
                adv_x = fgsm_attack(small_model, x, y, 0.01)
                adv = float(_segmentation_loss(small_model, Tensor(adv_x), y).data)
            wins += adv >= clean
        assert wins >= 9

    def test_pgd_zero_eps_identity(self, small_model, rng):
        x = rng.uniform(0, 1, size=(8, 8, 3))
        y = rng.integers(0, 2, size=(8, 8))
        np.testing.assert_array_equal(pgd_attack(small_model, x, y, 0.0, iters=3), x)

    def test_pgd_ball_and_range_containment(self, small_model, rng):
        x = rng.uniform(0, 1, size=(8, 8, 3))
        y = rng.integers(0, 2, size=(8, 8))
        adv = pgd_attack(small_model, x, y, 0.05, iters=5)
        assert np.abs(adv - x).max() <= 0.05 + 1e-12
        assert adv.min() >= 0.0 and adv.max() <= 1.0

    def test_pgd_beats_fgsm_mostly(self, small_model, rng):
        wins = 0
        for i in range(5):
            x = rng.uniform(0, 1, size=(8, 8, 3))
            y = rng.integers(0, 2, size=(8, 8))
            with no_grad():
                f = float(_segmentation_loss(
                    small_model, Tensor(fgsm_attack(small_model, x, y, 0.05)), y).data)
                p = float(_segmentation_loss(
                    small_model, Tensor(pgd_attack(small_model, x, y, 0.05, iters=20)), y).data)
            wins += p >= f
        assert wins >= 4

    def test_input_gradient_shape(self, small_model, rng):
        x = rng.uniform(0, 1, size=(8, 8, 3))
        y = rng.integers(0, 2, size=(8, 8))
        g, loss = input_gradient(small_model, x, y)
        assert g.shape == x.shape and np.isfinite(loss)
