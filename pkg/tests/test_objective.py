import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from npid.membank import MemoryBank
from npid.objective import (NceConfig, ParametricHead, ProximalConfig, StateError,
                            batch_objective, estimate_z, exact_z, full_objective,
                            full_softmax_loss, nce_loss, nce_posterior, np_softmax_prob,
                            parametric_softmax_loss, proximal_penalty)
from npid.tensor import Tensor, l2_normalize_rows

from _fd import numeric_grad, rel_err


def units(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def dense_softmax(logits):
    """Reference softmax without max subtraction (inputs kept small in tests)."""
    e = np.array([np.exp(z) for z in logits])
    return e / sum(e)


def through_sphere(loss_fn, x):
    """Loss as a function of a pre-normalized vector, for tangent-space checks."""
    return loss_fn(x / np.linalg.norm(x))


def sphere_grad(grad_f, x):
    leaf = Tensor(x[None, :], requires_grad=True)
    l2_normalize_rows(leaf).backward(grad_f[None, :])
    return leaf.grad[0]


# --- parametric softmax -----------------------------------------------------

def test_parametric_single_class_loss_zero():
    head = ParametricHead(np.array([[0.3, -0.2]]))
    loss, gf, gw = parametric_softmax_loss(head, [[0.6, 0.8]], [0])
    assert loss == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(gf, 0.0, atol=1e-15)


def test_parametric_zero_weights_log_n():
    head = ParametricHead(np.zeros((7, 3)))
    loss, _, _ = parametric_softmax_loss(head, [[1.0, 0.0, 0.0]], [4])
    assert loss == pytest.approx(np.log(7), abs=1e-12)


def test_parametric_matches_dense_oracle_and_gradients():
    rng = np.random.default_rng(0)
    head = ParametricHead(rng.standard_normal((5, 4)))
    f = units(rng, 3, 4)
    t = np.array([1, 4, 1])
    loss, gf, gw = parametric_softmax_loss(head, f, t)
    ref = np.mean([-np.log(dense_softmax(head.weights @ f[b])[t[b]]) for b in range(3)])
    assert abs(loss - ref) < 1e-10

    def lf(z):
        return parametric_softmax_loss(head, z, t)[0]

    def lw(z):
        return parametric_softmax_loss(ParametricHead(z), f, t)[0]

    assert rel_err(gf, numeric_grad(lf, f)) < 1e-6
    assert rel_err(gw, numeric_grad(lw, head.weights)) < 1e-6


def test_parametric_target_out_of_range():
    with pytest.raises(IndexError):
        parametric_softmax_loss(ParametricHead(np.zeros((3, 2))), [[1.0, 0.0]], [3])


# --- non-parametric softmax -------------------------------------------------

def test_np_softmax_examples():
    np.testing.assert_array_equal(np_softmax_prob(np.array([[1.0, 0.0]]), [0.0, 1.0], 0.07), [1.0])
    same = np.tile([0.6, 0.8], (5, 1))
    np.testing.assert_allclose(np_softmax_prob(same, [1.0, 0.0], 0.07), 0.2, rtol=0, atol=1e-15)
    bank = np.array([[1.0, 0.0], [0.0, 1.0], [2 ** -0.5, 2 ** -0.5]])
    p = np_softmax_prob(bank, [1.0, 0.0], 1.0)
    np.testing.assert_allclose(p, dense_softmax([1.0, 0.0, 2 ** -0.5]), rtol=0, atol=1e-12)


def test_np_softmax_rejects_bad_tau():
    with pytest.raises(ValueError):
        np_softmax_prob(np.eye(2), [1.0, 0.0], 0.0)


@pytest.mark.parametrize("seed", range(10))
def test_np_softmax_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 65))
    bank = units(rng, n, 8)
    f = units(rng, 1, 8)[0]
    tau = float(rng.uniform(0.1, 1.0))
    brute = np.array([np.exp(bank[i] @ f / tau) for i in range(n)])
    brute /= brute.sum()
    p = np_softmax_prob(MemoryBank(bank), f, tau)
    assert np.max(np.abs(p - brute)) < 1e-10
    assert abs(p.sum() - 1) < 1e-10


def test_np_softmax_shift_invariance_and_temperature_monotone():
    rng = np.random.default_rng(1)
    bank = units(rng, 20, 6)
    f = units(rng, 1, 6)[0]
    p = np_softmax_prob(bank, f, 0.5)
    top = int(np.argmax(p))
    assert np_softmax_prob(bank, f, 0.25)[top] > p[top]
    # a constant logit shift is what max-subtraction does internally
    logits = bank @ f / 0.5
    shifted = np.exp(logits + 100 - (logits + 100).max())
    np.testing.assert_allclose(p, shifted / shifted.sum(), rtol=1e-12)


def test_full_softmax_own_row_orthogonal_rest():
    tau, n = 0.07, 4
    bank = np.eye(n)
    loss, _ = full_softmax_loss(bank, bank[:1], [0], tau)
    expect = -np.log(np.exp(1 / tau) / (np.exp(1 / tau) + (n - 1)))
    assert loss == pytest.approx(expect, rel=1e-12)
    assert loss < 1e-5


def test_full_softmax_uniform_bank_is_log_n():
    bank = np.tile([1.0, 0.0, 0.0], (9, 1))
    loss, _ = full_softmax_loss(bank, [[0.0, 1.0, 0.0]], [3], 0.07)
    assert loss == pytest.approx(np.log(9), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_full_softmax_gradient(seed):
    rng = np.random.default_rng(seed)
    bank = units(rng, 12, 5)
    f = units(rng, 3, 5)
    t = rng.integers(0, 12, 3)
    loss, g = full_softmax_loss(bank, f, t, 0.1)
    fd = numeric_grad(lambda z: full_softmax_loss(bank, z, t, 0.1)[0], f)
    assert rel_err(g, fd) < 1e-6


# --- partition estimate -----------------------------------------------------

def test_z_all_zero_similarity_is_n():
    bank = np.tile([0.0, 1.0], (50, 1))
    assert estimate_z(bank, [1.0, 0.0], 0.07, 17, rng=0) == pytest.approx(50.0, rel=1e-15)


def test_z_exhaustive_sample_is_exact():
    rng = np.random.default_rng(2)
    bank = units(rng, 30, 4)
    f = units(rng, 1, 4)[0]
    z = estimate_z(bank, f, 0.07, 30, indices=np.arange(30))
    assert z == pytest.approx(exact_z(bank, f, 0.07), rel=1e-12)


def test_z_error_shrinks_with_samples():
    errors = []
    for m in (16, 256, 4096):
        rel = []
        for seed in range(50):
            rng = np.random.default_rng(seed)
            bank = units(rng, 1000, 32)
            f = units(rng, 1, 32)[0]
            exact = exact_z(bank, f, 0.07)
            rel.append(abs(estimate_z(bank, f, 0.07, m, rng=rng) - exact) / exact)
        errors.append(np.mean(rel))
    assert errors[0] > errors[1] > errors[2]


def test_z_batch_averages_rows():
    rng = np.random.default_rng(3)
    bank = units(rng, 20, 4)
    f = units(rng, 3, 4)
    idx = rng.integers(0, 20, (3, 6))
    per_row = [estimate_z(bank, f[b], 0.07, 6, indices=idx[b]) for b in range(3)]
    assert estimate_z(bank, f, 0.07, 6, indices=idx) == pytest.approx(np.mean(per_row), rel=1e-13)


# --- NCE --------------------------------------------------------------------

def test_posterior_examples():
    assert nce_posterior(0.0, 10, 3) == 0.0
    assert nce_posterior(3 / 10, 10, 3) == pytest.approx(0.5)
    assert nce_posterior(0.2, 8, 4) == pytest.approx(0.2 / 0.7, rel=1e-15)


def test_nce_config_rejects_zero_noise():
    with pytest.raises(ValueError):
        NceConfig(m=0)
    with pytest.raises(ValueError):
        NceConfig(tau=-1)
    with pytest.raises(ValueError):
        NceConfig(z_refresh="sometimes")
    assert NceConfig(m=4096).effective_m(100) == 99


def test_nce_requires_z():
    with pytest.raises(StateError, match="estimate_z"):
        nce_loss(np.eye(3), [1.0, 0, 0], 0, [1, 2], NceConfig(m=2))


def test_nce_matches_direct_formula():
    rng = np.random.default_rng(4)
    n, m, tau, z = 10, 4, 0.3, 25.0
    bank = units(rng, n, 5)
    f = units(rng, 1, 5)[0]
    noise = [3, 3, 7, 0]
    loss, _ = nce_loss(bank, f, 2, noise, NceConfig(m=m, tau=tau, z_estimate=z))

    def h(j):
        p = np.exp(bank[j] @ f / tau) / z
        return p / (p + m / n)

    ref = -np.log(h(2)) - sum(np.log(1 - h(j)) for j in noise)
    assert loss == pytest.approx(ref, rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_nce_gradient_on_the_sphere(seed):
    rng = np.random.default_rng(seed)
    n, m = 16, 6
    bank = units(rng, n, 5)
    x = rng.standard_normal(5)
    noise = rng.integers(0, n, m)
    cfg = NceConfig(m=m, tau=0.2, z_estimate=float(rng.uniform(5, 50)))
    _, g = nce_loss(bank, x / np.linalg.norm(x), 3, noise, cfg)
    fd = numeric_grad(lambda z: through_sphere(lambda f: nce_loss(bank, f, 3, noise, cfg)[0], z), x)
    assert rel_err(sphere_grad(g, x), fd) < 1e-5


def test_nce_ranks_like_full_softmax_with_exhaustive_noise():
    rng = np.random.default_rng(5)
    n, tau, agree = 8, 0.07, 0
    for _ in range(20):
        bank = units(rng, n, 16)
        pos = int(rng.integers(n))
        noise = [j for j in range(n) if j != pos]
        cands = units(rng, 2, 16)
        full = [full_softmax_loss(bank, c[None], [pos], tau)[0] for c in cands]
        nce = [nce_loss(bank, c, pos, noise,
                        NceConfig(m=n - 1, tau=tau, z_estimate=exact_z(bank, c, tau)))[0]
               for c in cands]
        agree += (full[0] < full[1]) == (nce[0] < nce[1])
    assert agree >= 19


@given(st.integers(0, 2 ** 32 - 1))
def test_losses_finite_for_unit_inputs(seed):
    rng = np.random.default_rng(seed)
    bank = units(rng, 6, 3)
    bank[0] = bank[1]  # exact alignment drives h to its extremes
    f = bank[1]
    cfg = NceConfig(m=5, tau=0.01, z_estimate=1e-300)
    loss, g = nce_loss(bank, f, 1, [0, 1, 2, 3, 1], cfg)
    assert np.isfinite(loss) and np.all(np.isfinite(g))
    loss, g = full_softmax_loss(bank, f[None], [2], 0.01)
    assert np.isfinite(loss) and np.all(np.isfinite(g))


# --- proximal term and batch objective --------------------------------------

def test_proximal_examples():
    v = np.array([0.6, 0.8])
    assert proximal_penalty(v, v, 0.5)[0] == 0.0
    val, g = proximal_penalty([1.0, 0.0], [0.0, 1.0], 0.5)
    assert val == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(g, [1.0, -1.0])
    with pytest.raises(ValueError):
        ProximalConfig(lam=-0.1)


def test_proximal_gradient():
    rng = np.random.default_rng(6)
    a, b = units(rng, 2, 7)
    _, g = proximal_penalty(a, b, 0.3)
    assert rel_err(g, numeric_grad(lambda z: proximal_penalty(z, b, 0.3)[0], a)) < 1e-8


def test_batch_without_prox_is_mean_nce():
    rng = np.random.default_rng(7)
    n, m = 20, 5
    bank = units(rng, n, 4)
    f = units(rng, 3, 4)
    idx = np.array([4, 9, 4])
    noise = rng.integers(0, n, (3, m))
    cfg = NceConfig(m=m, tau=0.1, z_estimate=30.0)
    loss, grad = batch_objective(bank, f, idx, noise, cfg, ProximalConfig(0.0))
    parts = [nce_loss(bank, f[b], idx[b], noise[b], cfg) for b in range(3)]
    assert loss == pytest.approx(np.mean([p[0] for p in parts]), rel=1e-13)
    np.testing.assert_allclose(grad, np.stack([p[1] for p in parts]) / 3, rtol=1e-12)


def test_batch_gradient_is_sum_of_parts():
    rng = np.random.default_rng(8)
    n, m, lam = 32, 8, 0.5
    bank = units(rng, n, 6)
    f = units(rng, 4, 6)
    idx = rng.choice(n, 4, replace=False)
    noise = rng.integers(0, n, (4, m))
    cfg = NceConfig(m=m, tau=0.07, z_estimate=90.0)
    loss, grad = batch_objective(bank, f, idx, noise, cfg, ProximalConfig(lam))
    pl, pg = zip(*(nce_loss(bank, f[b], idx[b], noise[b], cfg) for b in range(4)))
    ql, qg = zip(*(proximal_penalty(f[b], bank[idx[b]], lam) for b in range(4)))
    assert abs(loss - (sum(pl) + sum(ql)) / 4) < 1e-12
    assert np.max(np.abs(grad - (np.stack(pg) + np.stack(qg)) / 4)) < 1e-12


def test_batch_dense_and_gathered_paths_agree(monkeypatch):
    import npid.objective as obj

    rng = np.random.default_rng(9)
    bank = units(rng, 40, 5)
    f = units(rng, 6, 5)
    idx = rng.integers(0, 40, 6)
    noise = rng.integers(0, 40, (6, 11))
    cfg = NceConfig(m=11, tau=0.07, z_estimate=60.0)
    dense = batch_objective(bank, f, idx, noise, cfg, ProximalConfig(0.5))
    monkeypatch.setattr(obj, "_DENSE_LIMIT", 0)
    gathered = batch_objective(bank, f, idx, noise, cfg, ProximalConfig(0.5))
    assert dense[0] == pytest.approx(gathered[0], rel=1e-13)
    np.testing.assert_allclose(dense[1], gathered[1], rtol=1e-12, atol=1e-15)


def test_single_instance_rejected():
    with pytest.raises(ValueError):
        batch_objective(np.eye(1, 3), [[1.0, 0, 0]], [0], [[0]],
                        NceConfig(m=1, z_estimate=1.0), ProximalConfig())
    with pytest.raises(ValueError):
        NceConfig().effective_m(1)


def test_full_objective_adds_prox():
    rng = np.random.default_rng(10)
    bank = units(rng, 10, 4)
    f = units(rng, 2, 4)
    base, g0 = full_objective(bank, f, [1, 2], 0.07, ProximalConfig(0.0))
    with_prox, g1 = full_objective(bank, f, [1, 2], 0.07, ProximalConfig(0.5))
    extra = np.mean([proximal_penalty(f[b], bank[[1, 2][b]], 0.5)[0] for b in range(2)])
    assert with_prox == pytest.approx(base + extra, rel=1e-13)
