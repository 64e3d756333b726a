import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vmfcomp.errors import DegenerateActivation, DimensionMismatch, ZeroFeatureVector, ZeroKernel
from vmfcomp.vmf_core import (VMFKernelBank, clustering_loss, fit_kernels, kmeanspp_sphere,
                              normalize_features, project_kernel_grads, project_kernels, recompose,
                              vmf_activations)


def fmap(*vectors):
    """(1, D, 1, P) feature map holding the given vectors along the width axis."""
    arr = torch.tensor(vectors, dtype=torch.float64).T
    return arr[None, :, None, :]


def bank_of(*mus, sigma=30.0):
    return VMFKernelBank.from_means(torch.tensor(mus, dtype=torch.float64), sigma=sigma)


# -- brute-force oracles: plain python loops over positions and kernels ----------

def oracle_activations(z, mus, sigma):
    n, d, h, w = z.shape
    out = np.zeros((n, len(mus), h, w))
    for b in range(n):
        for y in range(h):
            for x in range(w):
                for j, mu in enumerate(mus):
                    dot = sum(float(mu[k]) * float(z[b, k, y, x]) for k in range(d))
                    out[b, j, y, x] = math.exp(sigma * dot) / math.exp(sigma)
    return out


def oracle_clustering(z, mus):
    n, d, h, w = z.shape
    total = 0.0
    for b in range(n):
        for y in range(h):
            for x in range(w):
                best = max(sum(float(mu[k]) * float(z[b, k, y, x]) for k in range(d)) for mu in mus)
                total += best
    return -total / (n * h * w)


def oracle_recompose(a, mus):
    n, J, h, w = a.shape
    d = len(mus[0])
    out = np.zeros((n, d, h, w))
    for b in range(n):
        for y in range(h):
            for x in range(w):
                vec = [float(a[b, j, y, x]) for j in range(J)]
                norm = math.sqrt(sum(v * v for v in vec))
                for j in range(J):
                    for k in range(d):
                        out[b, k, y, x] += vec[j] / norm * float(mus[j][k])
    return out


def random_instance(rng, d=None, J=None, h=None, w=None):
    d = d or int(rng.integers(2, 9))
    J = J or int(rng.integers(1, 5))
    h = h or int(rng.integers(1, 5))
    w = w or int(rng.integers(1, 17 // h + 1))
    z = torch.from_numpy(rng.normal(size=(1, d, h, w)))
    mus = torch.from_numpy(rng.normal(size=(J, d)))
    mus = mus / mus.norm(dim=1, keepdim=True)
    return normalize_features(z), VMFKernelBank.from_means(mus, sigma=float(rng.uniform(1, 30)))


class TestNormalizeFeatures:
    def test_scales_to_unit(self):
        out = normalize_features(fmap((3.0, 4.0)))
        np.testing.assert_allclose(out[0, :, 0, 0], [0.6, 0.8])

    def test_unit_unchanged(self):
        out = normalize_features(fmap((1.0, 0.0)))
        np.testing.assert_allclose(out[0, :, 0, 0], [1.0, 0.0])

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroFeatureVector):
            normalize_features(fmap((1.0, 0.0), (0.0, 0.0)))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=3, max_size=3).filter(
        lambda v: sum(x * x for x in v) > 1e-4), st.floats(1e-3, 1e3))
    def test_argmax_stable_under_positive_scaling(self, vec, scale):
        bank = bank_of((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0), (0.6, 0.8, 0.0))
        a1 = vmf_activations(normalize_features(fmap(tuple(vec))), bank)
        a2 = vmf_activations(normalize_features(fmap(tuple(v * scale for v in vec))), bank)
        assert int(a1.argmax(dim=1)) == int(a2.argmax(dim=1))


class TestActivations:
    def test_aligned_kernel_gives_one(self):
        a = vmf_activations(fmap((1.0, 0.0)), bank_of((1.0, 0.0), (0.0, 1.0)))
        assert float(a[0, 0, 0, 0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal_kernel(self):
        a = vmf_activations(fmap((1.0, 0.0)), bank_of((1.0, 0.0), (0.0, 1.0)))
        assert float(a[0, 1, 0, 0]) == pytest.approx(math.exp(-30), rel=1e-12)

    def test_oblique_value(self):
        a = vmf_activations(fmap((0.6, 0.8)), bank_of((1.0, 0.0)))
        assert float(a[0, 0, 0, 0]) == pytest.approx(math.exp(-12), rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            vmf_activations(fmap((1.0, 0.0, 0.0)), bank_of((1.0, 0.0)))

    def test_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            zn, bank = random_instance(rng)
            a = vmf_activations(zn, bank)
            assert float(a.min()) >= math.exp(-2 * bank.sigma) * (1 - 1e-12)
            assert float(a.max()) <= 1.0 + 1e-12

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            zn, bank = random_instance(rng)
            expected = oracle_activations(zn.numpy(), bank.mus.detach().numpy(), bank.sigma)
            np.testing.assert_allclose(vmf_activations(zn, bank).detach().numpy(), expected,
                                       rtol=1e-10, atol=1e-300)

    def test_no_overflow_at_large_sigma(self):
        zn, bank = random_instance(np.random.default_rng(3), d=4, J=3)
        bank.sigma = bank.log_norm_const = 500.0
        assert torch.isfinite(vmf_activations(zn, bank)).all()


class TestClusteringLoss:
    def test_perfect_clustering(self):
        bank = bank_of((1.0, 0.0), (0.0, 1.0))
        assert float(clustering_loss(bank, fmap((1.0, 0.0), (0.0, 1.0)))) == pytest.approx(-1.0)

    def test_single_position(self):
        bank = bank_of((1.0, 0.0), (0.0, 1.0))
        assert float(clustering_loss(bank, fmap((0.6, 0.8)))) == pytest.approx(-0.8)

    def test_orthogonal_gives_zero(self):
        bank = bank_of((1.0, 0.0, 0.0))
        assert float(clustering_loss(bank, fmap((0.0, 1.0, 0.0), (0.0, 0.0, 1.0)))) == 0.0

    def test_matches_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            zn, bank = random_instance(rng)
            expected = oracle_clustering(zn.numpy(), bank.mus.detach().numpy())
            assert float(clustering_loss(bank, zn)) == pytest.approx(expected, abs=1e-10)

    def test_range(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            zn, bank = random_instance(rng)
            assert -1.0 - 1e-12 <= float(clustering_loss(bank, zn)) <= 1.0 + 1e-12


class TestRecompose:
    def test_one_hot_selects_kernel(self):
        rng = np.random.default_rng(6)
        mus = torch.from_numpy(rng.normal(size=(5, 4)))
        bank = VMFKernelBank.from_means(mus / mus.norm(dim=1, keepdim=True))
        a = torch.zeros(1, 5, 1, 1, dtype=torch.float64)
        a[0, 3] = 0.7
        np.testing.assert_allclose(recompose(a, bank)[0, :, 0, 0].detach(), bank.mus[3].detach(),
                                   atol=1e-15)

    def test_uniform_activations(self):
        rng = np.random.default_rng(7)
        mus = torch.from_numpy(rng.normal(size=(4, 3)))
        bank = VMFKernelBank.from_means(mus / mus.norm(dim=1, keepdim=True))
        a = torch.full((1, 4, 1, 1), 0.25, dtype=torch.float64)
        expected = bank.mus.detach().sum(0) / 2.0
        np.testing.assert_allclose(recompose(a, bank)[0, :, 0, 0].detach(), expected, atol=1e-14)

    def test_two_step_oracle_on_basis_kernels(self):
        # Eq.5 then Eq.9 by hand: a = (e^{-12}, e^{-6}), normalised, times basis vectors
        bank = bank_of((1.0, 0.0), (0.0, 1.0))
        zt = recompose(vmf_activations(fmap((0.6, 0.8)), bank), bank)[0, :, 0, 0]
        a1, a2 = math.exp(30 * 0.6 - 30), math.exp(30 * 0.8 - 30)
        n = math.hypot(a1, a2)
        np.testing.assert_allclose(zt.detach().numpy(), [a1 / n, a2 / n], rtol=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(30):
            zn, bank = random_instance(rng)
            a = vmf_activations(zn, bank)
            expected = oracle_recompose(a.detach().numpy(), bank.mus.detach().numpy())
            np.testing.assert_allclose(recompose(a, bank).detach().numpy(), expected,
                                       rtol=1e-10, atol=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateActivation):
            recompose(torch.zeros(1, 2, 1, 1, dtype=torch.float64), bank_of((1.0, 0.0), (0.0, 1.0)))

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            recompose(torch.ones(1, 3, 1, 1, dtype=torch.float64), bank_of((1.0, 0.0), (0.0, 1.0)))


class TestProjectKernels:
    def test_scales(self):
        bank = bank_of((2.0, 0.0))
        project_kernels(bank)
        np.testing.assert_allclose(bank.mus.detach()[0], [1.0, 0.0])

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        bank = VMFKernelBank.from_means(torch.from_numpy(rng.normal(size=(6, 5))))
        once = project_kernels(bank).mus.detach().clone()
        twice = project_kernels(bank).mus.detach()
        np.testing.assert_allclose(twice, once, atol=1e-12, rtol=0)

    def test_zero_kernel(self):
        with pytest.raises(ZeroKernel):
            project_kernels(bank_of((0.0, 0.0)))

    def test_fresh_bank_is_unit(self):
        bank = VMFKernelBank(12, 64, seed=3)
        assert bank.max_norm_error() < 1e-6
        assert bank.norm_const == pytest.approx(math.exp(30))


def test_fresh_bank_seeded():
    a = VMFKernelBank(4, 8, seed=5).mus.detach()
    b = VMFKernelBank(4, 8, seed=5).mus.detach()
    assert torch.equal(a, b)


def test_kmeanspp_picks_distinct_clusters():
    pts = torch.tensor([[1.0, 0.0], [0.99, 0.141], [0.0, 1.0], [0.141, 0.99]], dtype=torch.float64)
    pts = pts / pts.norm(dim=1, keepdim=True)
    for seed in range(10):
        picks = kmeanspp_sphere(pts, 2, seed=seed)
        assert {p // 2 for p in picks} == {0, 1}


def test_kmeanspp_covers_separated_clusters():
    rng = np.random.default_rng(11)
    centers = np.linalg.qr(rng.normal(size=(6, 6)))[0][:4]
    pts = np.repeat(centers, 50, axis=0) + 0.15 * rng.normal(size=(200, 6))
    pts = torch.from_numpy(pts / np.linalg.norm(pts, axis=1, keepdims=True))
    for seed in range(30):
        assert {p // 50 for p in kmeanspp_sphere(pts, 4, seed=seed)} == {0, 1, 2, 3}


def test_kernel_grad_projection_is_tangent():
    rng = np.random.default_rng(12)
    bank = VMFKernelBank.from_means(torch.from_numpy(rng.normal(size=(3, 5))))
    project_kernels(bank)
    bank.mus.grad = torch.from_numpy(rng.normal(size=(3, 5)))
    radial_free = bank.mus.grad - (bank.mus.grad * bank.mus).sum(1, keepdim=True) * bank.mus
    project_kernel_grads(bank)
    np.testing.assert_allclose((bank.mus.grad * bank.mus).sum(1).detach(), 0, atol=1e-14)
    np.testing.assert_allclose(bank.mus.grad.detach(), radial_free.detach(), atol=1e-14)


def test_fit_kernels_reaches_cluster_means():
    # kernels already at the spherical means must stay put under Adam
    rng = np.random.default_rng(13)
    centers = np.linalg.qr(rng.normal(size=(4, 4)))[0][:2]
    pts = np.repeat(centers, 20, axis=0) + 0.1 * rng.normal(size=(40, 4))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    means = np.stack([pts[:20].sum(0), pts[20:].sum(0)])
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    bank = VMFKernelBank.from_means(torch.from_numpy(means))
    fit_kernels(bank, torch.from_numpy(pts.T.reshape(1, 4, 5, 8).copy()), steps=300)
    cos = (bank.mus.detach().numpy() * means).sum(1)
    assert cos.min() > 0.9999
