import numpy as np
import pytest

from gradcheck import check_module
from loggia.nn import autodiff as ad
from loggia.policy import (LoggiaPolicy, MpnConfig, ValueFunction, act, batch_arrays, batch_graphs,
                           deterministic_weights, entropy, feature_dims, kl_normal, log_prob, lognormal_logpdf,
                           weights_to_action)
from loggia.routing import to_action_single
from loggia.telemetry import Telemetry


def random_items(rng, topo, count, cfg):
    dn, de, dg = feature_dims(cfg)
    snd = np.array([u for u, _ in topo.edges])
    rcv = np.array([v for _, v in topo.edges])
    return [(rng.normal(size=(topo.num_nodes, dn)), rng.normal(size=(len(snd), de)), rng.normal(size=dg), snd, rcv)
            for _ in range(count)]


def test_batching_matches_single_graphs(mini5):
    cfg = MpnConfig()
    pol = LoggiaPolicy(cfg, seed=3)
    pol.readout.out.w.data *= 100  # make outputs non-trivial
    items = random_items(np.random.default_rng(0), mini5, 3, cfg)
    mu_b, sig_b = pol(batch_arrays(items))
    for i, it in enumerate(items):
        mu, sig = pol(batch_arrays([it]))
        np.testing.assert_allclose(mu_b.data[12 * i:12 * (i + 1)], mu.data, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(sig_b.data[12 * i:12 * (i + 1)], sig.data, rtol=1e-12, atol=1e-14)


def test_permutation_equivariance(mini5):
    cfg = MpnConfig()
    pol = LoggiaPolicy(cfg, seed=4)
    pol.readout.out.w.data *= 100
    vf = ValueFunction(cfg, seed=4)
    rng = np.random.default_rng(1)
    nx, ex, gx, snd, rcv = random_items(rng, mini5, 1, cfg)[0]
    perm_nodes = rng.permutation(5)  # old node i becomes perm_nodes[i]
    perm_edges = rng.permutation(12)  # new edge j is old edge perm_edges[j]
    nx2 = np.empty_like(nx)
    nx2[perm_nodes] = nx
    item2 = (nx2, ex[perm_edges], gx, perm_nodes[snd[perm_edges]], perm_nodes[rcv[perm_edges]])
    mu, sig = pol(batch_arrays([(nx, ex, gx, snd, rcv)]))
    mu2, sig2 = pol(batch_arrays([item2]))
    np.testing.assert_allclose(mu2.data, mu.data[perm_edges], rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(sig2.data, sig.data[perm_edges], rtol=1e-10, atol=1e-13)
    v = vf(batch_arrays([(nx, ex, gx, snd, rcv)])).data
    v2 = vf(batch_arrays([item2])).data
    np.testing.assert_allclose(v2, v, rtol=1e-10)


def test_initial_policy_is_near_uniform(mini5):
    tel = Telemetry(mini5)
    tel.record_idle(0)
    pol = LoggiaPolicy(MpnConfig(), seed=0)
    mu, sigma = pol(batch_graphs([tel.assemble(1)], [np.ones(12)]))
    assert np.all(np.abs(mu.data) < 0.1)
    np.testing.assert_allclose(sigma.data, 0.3, atol=0.02)


def test_lognormal_sampling_mean():
    rng = np.random.default_rng(0)
    mu = np.array([-0.5, 0.0, 0.7])
    sigma = np.array([0.2, 0.5, 0.3])
    samples = np.array([act(mu, sigma, True, rng)[0] for _ in range(40_000)])
    np.testing.assert_allclose(samples.mean(axis=0), np.exp(mu + sigma ** 2 / 2), rtol=0.02)
    w, lp = act(mu, sigma, False)
    np.testing.assert_array_equal(w, np.exp(mu))
    assert lp == pytest.approx(lognormal_logpdf(w, mu, sigma).sum())


def test_lognormal_density_integrates_to_one():
    w = np.linspace(1e-6, 30, 600_001)
    dens = np.exp(lognormal_logpdf(w, 0.4, 0.6))
    assert float(np.sum((dens[1:] + dens[:-1]) / 2 * np.diff(w))) == pytest.approx(1.0, abs=1e-6)


def test_log_prob_matches_numpy():
    rng = np.random.default_rng(2)
    mu, sigma = rng.normal(size=7), rng.uniform(0.1, 1.0, 7)
    w = np.exp(rng.normal(size=7))
    seg = ad.Segments(np.array([0, 0, 0, 1, 1, 1, 1]), 2)
    lp = log_prob(ad.Tensor(mu), ad.Tensor(sigma), w, seg).data
    ref = lognormal_logpdf(w, mu, sigma)
    np.testing.assert_allclose(lp, [ref[:3].sum(), ref[3:].sum()], rtol=1e-12)


def test_entropy_monte_carlo():
    rng = np.random.default_rng(3)
    mu, sigma = np.array([0.3, -0.2]), np.array([0.4, 0.9])
    seg = ad.Segments(np.array([0, 1]), 2)
    h_log = entropy(ad.Tensor(mu), ad.Tensor(sigma), seg).data
    h_w = entropy(ad.Tensor(mu), ad.Tensor(sigma), seg, include_mu=True).data
    y = mu + sigma * rng.standard_normal((200_000, 2))
    gauss = -(-np.log(sigma) - 0.5 * np.log(2 * np.pi) - (y - mu) ** 2 / (2 * sigma ** 2))
    np.testing.assert_allclose(h_log, gauss.mean(axis=0), atol=0.01)
    np.testing.assert_allclose(h_w, -lognormal_logpdf(np.exp(y), mu, sigma).mean(axis=0), atol=0.01)


def test_kl_normal():
    mu, s = np.array([0.1, -0.4]), np.array([0.3, 0.7])
    assert np.all(kl_normal(mu, s, mu, s) == 0.0)
    rng = np.random.default_rng(4)
    mu2, s2 = np.array([0.3, -0.1]), np.array([0.5, 0.6])
    y = mu + s * rng.standard_normal((400_000, 2))
    logp = lambda m, sd: -np.log(sd) - (y - m) ** 2 / (2 * sd ** 2)
    np.testing.assert_allclose(kl_normal(mu, s, mu2, s2), (logp(mu, s) - logp(mu2, s2)).mean(axis=0), atol=5e-3)


def test_deterministic_weights_positive():
    assert np.all(deterministic_weights(np.array([-50.0, 0.0, 3.0])) > 0)
    assert np.all(deterministic_weights(np.array([-50.0, 0.0]), log_space=False) > 0)


def test_weights_to_action(mini5):
    w = np.linspace(1, 2, 12)
    assert weights_to_action(mini5, [w], False) == to_action_single(mini5, w)
    rows = weights_to_action(mini5, [w] * 5, True)
    single = to_action_single(mini5, w)
    for u in range(5):
        np.testing.assert_array_equal(np.delete(rows[u], u), np.delete(single.next_hop[u], u))


def mpn_pipeline_violation(seed, topo):
    """Finite differences through MPN forward, per-edge log-density and a per-graph reduction."""
    cfg = MpnConfig(steps=2, latent=6, hidden_layers=1, readout_scale=1.0)
    pol = LoggiaPolicy(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    batch = batch_arrays(random_items(rng, topo, 2, cfg))
    w = np.exp(rng.normal(size=len(batch.edge_x)))
    coef = rng.normal(size=2)

    def loss():
        mu, sigma = pol(batch)
        lp = log_prob(mu, sigma, w, batch.edges_by_graph)
        return ad.sum_(ad.mul(lp, ad.Tensor(coef)))

    return check_module(pol.parameters(), loss, rng)


@pytest.mark.parametrize("seed", range(3))
def test_mpn_log_prob_gradients(seed, mini5):
    assert mpn_pipeline_violation(seed, mini5) <= 0


def test_value_gradients(mini5):
    cfg = MpnConfig(steps=2, latent=6, hidden_layers=1, feed_previous_weights=False)
    vf = ValueFunction(cfg, seed=1)
    rng = np.random.default_rng(1)
    batch = batch_arrays(random_items(rng, mini5, 3, cfg))
    loss = lambda: ad.sum_(ad.square(vf(batch)))
    assert check_module(vf.parameters(), loss, rng) <= 0


def test_config_validation():
    with pytest.raises(ValueError):
        MpnConfig(steps=0)
    with pytest.raises(ValueError):
        MpnConfig(aggregate="sideways")
