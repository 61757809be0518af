import math

import pytest
import torch
import torch.nn.functional as F
from scipy import integrate, stats

from dvsp.bottleneck import (
    IbHyperparams,
    ShellSpec,
    dvib_loss,
    dvsp_loss,
    kl_standard_normal,
    shell_sample,
    shell_spec,
    softmax_loss,
    sphere_project,
)
from dvsp.model import Network, mlp_config
from dvsp.numerics import Rng, as_tensor, sample_gaussian, sample_unit_sphere


def toy_net(seed=0, latent=2):
    # frozen weights: these tests only read loss values or input gradients
    net = Network(mlp_config(2, hidden=(8,), latent_dim=latent, num_classes=2)).init_weights(Rng(seed))
    return net.requires_grad_(False)


def toy_batch(seed=0, n=16):
    rng = Rng(seed)
    return rng.uniform((n, 2)), rng.permutation(n) % 2


def test_kl_examples():
    assert float(kl_standard_normal(torch.zeros(4), torch.ones(4))) == 0.0
    assert float(kl_standard_normal(as_tensor([1.0, 0, 0]), torch.ones(3))) == 0.5
    with pytest.raises(ValueError):
        kl_standard_normal(torch.zeros(2), as_tensor([1.0, 0.0]))


def test_kl_nonnegative_random():
    rng = Rng(1)
    mu = 3 * sample_gaussian(rng, (10_000, 5))
    lam = torch.exp(2 * sample_gaussian(rng, (10_000, 5)))
    assert (kl_standard_normal(mu, lam) >= 0).all()


def kl_quadrature(mu, lam):
    p = stats.norm(mu, math.sqrt(lam))
    lo, hi = mu - 40 * math.sqrt(lam), mu + 40 * math.sqrt(lam)
    val, _ = integrate.quad(lambda z: p.pdf(z) * (p.logpdf(z) - stats.norm.logpdf(z)), lo, hi,
                            epsabs=1e-13, epsrel=1e-12, limit=400, points=[mu])
    return val


def test_kl_matches_quadrature_1d():
    rng = Rng(2)
    for _ in range(50):
        mu = float(2 * sample_gaussian(rng, (1,)))
        lam = float(torch.exp(sample_gaussian(rng, (1,))))
        closed = float(kl_standard_normal(as_tensor([mu]), as_tensor([lam])))
        assert abs(closed - kl_quadrature(mu, lam)) < 1e-6


def test_sphere_project_examples():
    assert torch.allclose(sphere_project(as_tensor([3.0, 4.0]), 1.0), as_tensor([0.6, 0.8]), atol=1e-15)
    z = sphere_project(sample_gaussian(Rng(0), (7,)), 2.0)
    assert torch.allclose(sphere_project(z, 2.0), z, atol=1e-12)
    with pytest.raises(ValueError):
        sphere_project(torch.zeros(3))


def test_sphere_project_preserves_direction():
    z = sample_gaussian(Rng(3), (100, 6))
    p = sphere_project(z, 3.0)
    cos = F.cosine_similarity(z, p, dim=1)
    assert torch.allclose(cos, torch.ones(100), atol=1e-12)


def test_shell_spec_examples():
    s = shell_spec(as_tensor([2.0, 0.0]), as_tensor([0.5, 1.5]))
    assert s.center.tolist() == [1.0, 0.0] and float(s.radius) == 1.0
    mu = as_tensor([0.3, -1.1, 2.0])
    assert torch.allclose(shell_spec(10 * mu, torch.ones(3)).center, shell_spec(mu, torch.ones(3)).center, atol=1e-15)
    assert float(shell_spec(mu, torch.full((3,), 0.49)).radius) == pytest.approx(0.49, abs=1e-15)


def test_shell_sample_examples():
    out = shell_sample(ShellSpec(as_tensor([1.0, 0.0]), as_tensor(0.5)), as_tensor([0.0, 1.0]))
    assert out.tolist() == [1.0, 0.5]
    c = as_tensor([0.6, 0.8])
    assert torch.equal(shell_sample(ShellSpec(c, as_tensor(0.0)), as_tensor([0.0, 1.0])), c)


def test_shell_sample_batched_shape_and_distance():
    rng = Rng(4)
    spec = shell_spec(sample_gaussian(rng, (5, 3)), torch.exp(sample_gaussian(rng, (5, 3))))
    u = sample_unit_sphere(rng, 3, count=7)
    z = shell_sample(spec, u)
    assert z.shape == (5, 7, 3)
    d = torch.linalg.vector_norm(z - spec.center[:, None, :], dim=-1)
    assert torch.allclose(d, spec.radius[:, None].expand(5, 7), atol=1e-12, rtol=0)


def test_deterministic_dvib_collapses_to_cross_entropy():
    net = toy_net()
    x, y = toy_batch()
    hp = IbHyperparams(beta=0.0, mc_samples=1)
    with torch.no_grad():
        mu, _ = net.encode(x)
        ce = F.cross_entropy(net.decoder(mu), y)
        assert abs(float(dvib_loss(net, x, y, hp, deterministic=True)) - float(ce)) < 1e-12
        assert abs(float(softmax_loss(net, x, y)) - float(ce)) < 1e-12


def test_dvib_loss_monotone_in_beta():
    net = toy_net()
    x, y = toy_batch()
    noise = sample_gaussian(Rng(5), (16, 4, 2))
    losses = [float(dvib_loss(net, x, y, IbHyperparams(beta=b), noise=noise)) for b in (0.0, 0.01, 0.1, 1.0)]
    assert losses == sorted(losses)


def test_dvib_manual_formula():
    net = toy_net(2)
    x, y = toy_batch(2, n=3)
    noise = sample_gaussian(Rng(6), (3, 5, 2))
    hp = IbHyperparams(beta=0.3, mc_samples=5)
    mu, lam = net.encode(x)
    expected = 0.0
    for i in range(3):
        lik = sum(float(F.log_softmax(net.decoder(mu[i] + lam[i].sqrt() * noise[i, l]), -1)[y[i]]) for l in range(5)) / 5
        kl = 0.5 * float(lam[i].sum() + (mu[i] ** 2).sum() - 2 - torch.log(lam[i]).sum())
        expected -= (lik - 0.3 * kl) / 3
    assert float(dvib_loss(net, x, y, hp, noise=noise)) == pytest.approx(expected, abs=1e-12)


def test_dvsp_manual_formula_and_kl_shared():
    net = toy_net(3)
    x, y = toy_batch(3, n=4)
    u = sample_unit_sphere(Rng(7), 2, count=3)
    hp = IbHyperparams(beta=0.2, mc_samples=3)
    loss, terms = dvsp_loss(net, x, y, hp, u, return_terms=True)
    mu, lam = net.encode(x)
    assert torch.equal(terms["kl"], kl_standard_normal(mu, lam))
    expected = 0.0
    for i in range(4):
        c = mu[i] / mu[i].norm()
        r = lam[i].mean()
        lik = sum(float(F.log_softmax(net.decoder(r * u[l] + c), -1)[y[i]]) for l in range(3)) / 3
        expected -= (lik - 0.2 * float(terms["kl"][i])) / 4
    assert float(loss) == pytest.approx(expected, abs=1e-12)
    assert float(dvsp_loss(net, x, y, hp, u)) == float(loss)


def test_dvsp_zero_mean_names_sample():
    net = toy_net()
    x, y = toy_batch(n=3)
    with torch.no_grad():
        net.mu_head.weight.zero_()
        net.mu_head.bias.zero_()
    with pytest.raises(ValueError, match=r"\[0, 1, 2\]"):
        dvsp_loss(net, x, y, IbHyperparams(), sample_unit_sphere(Rng(0), 2, count=2))


def test_empty_batch_errors():
    net = toy_net()
    with pytest.raises(ValueError, match="empty"):
        dvib_loss(net, torch.zeros(0, 2), torch.zeros(0, dtype=torch.long), IbHyperparams(), rng=Rng(0))
    with pytest.raises(ValueError, match="empty"):
        dvsp_loss(net, torch.zeros(0, 2), torch.zeros(0, dtype=torch.long), IbHyperparams(), torch.ones(1, 2))


def test_dvib_mc_estimator_converges():
    net = toy_net(4)
    x, y = toy_batch(4, n=64)
    with torch.no_grad():
        vals = {m: float(dvib_loss(net, x, y, IbHyperparams(mc_samples=m), rng=Rng(m))) for m in (256, 4096)}
    assert abs(vals[256] - vals[4096]) < 0.01


def test_dvsp_input_gradient_available():
    net = toy_net(5)
    x, y = toy_batch(5, n=4)
    xr = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(dvsp_loss(net, xr, y, IbHyperparams(), sample_unit_sphere(Rng(0), 2, count=4)), xr)
    assert g.shape == x.shape and g.abs().sum() > 0


def test_hyperparam_validation():
    assert IbHyperparams().epsilon == 0.1
    for bad in ({"beta": -1}, {"radius": 0}, {"mc_samples": 0}, {"epsilon": -0.1}):
        with pytest.raises(ValueError):
            IbHyperparams(**bad)
