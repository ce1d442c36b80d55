import math

import numpy as np
import pytest

from pldpirl import ops
from pldpirl.losses import (
    AssignmentError,
    LossConfig,
    LossConfigError,
    nce_loss,
    pld_loss,
    similarity_h,
    total_loss,
)
from pldpirl.tensor import Tensor, backward, parameter


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def scalar_h(cos, tau, ratio):
    return math.exp(cos / tau) / (math.exp(cos / tau) + ratio)


def test_h_examples():
    e = unit([1.0, 2.0, 3.0])
    assert similarity_h(e, e, 0.4, 1.0).item() == pytest.approx(math.exp(2.5) / (math.exp(2.5) + 1), abs=1e-12)
    assert similarity_h([1.0, 0.0], [0.0, 1.0], 0.7, 1.0).item() == 0.5
    # the 1 - 1e-8 bound needs exp(-cos/tau) * 1e-9 < 1e-8, i.e. cos > -0.92 at tau 0.4
    for c in (1.0, 0.0, -0.9):
        g = np.array([c, math.sqrt(1 - c * c)])
        assert similarity_h([1.0, 0.0], g, 0.4, 1e-9).item() > 1 - 1e-8


@pytest.mark.parametrize("tau,ratio", [(0.0, 1.0), (-1.0, 1.0), (0.4, 0.0)])
def test_h_rejects_bad_parameters(tau, ratio):
    with pytest.raises(LossConfigError):
        similarity_h([1.0, 0.0], [1.0, 0.0], tau, ratio)


def test_h_is_bounded_and_monotone_over_dense_sweep():
    for tau in (0.2, 0.4, 0.6):
        hs = []
        for c in np.linspace(-1, 1, 2001):
            g = np.array([c, math.sqrt(max(0.0, 1 - c * c))])
            hs.append(similarity_h([1.0, 0.0], g, tau, 64 / 600).item())
        hs = np.array(hs)
        assert np.all((hs > 0) & (hs < 1))
        assert np.all(np.diff(hs) > 0)


def test_nce_zero_negative_closed_form():
    e = unit([0.3, -0.2, 0.9])
    cfg = LossConfig(tau=0.4, negatives=5, dataset_size=5)  # ratio 1
    got = nce_loss(e, e, None, cfg).item()
    assert got == pytest.approx(-math.log(scalar_h(1.0, 0.4, 1.0)), abs=1e-12)
    assert got == pytest.approx(0.078889, abs=1e-6)
    rng = np.random.default_rng(0)
    for _ in range(50):
        f, g = unit(rng.normal(size=8)), unit(rng.normal(size=8))
        assert nce_loss(f, g, np.empty((0, 8)), cfg).item() == pytest.approx(
            -math.log(scalar_h(float(f @ g), 0.4, 1.0)), abs=1e-12)


def test_nce_matches_scalar_oracle_with_negatives():
    rng = np.random.default_rng(1)
    f, g, negs = unit(rng.normal(size=6)), unit(rng.normal(size=6)), unit(rng.normal(size=(4, 6)))
    cfg = LossConfig(tau=0.2, negatives=4, dataset_size=40)
    r = cfg.ratio
    want = -math.log(scalar_h(f @ g, 0.2, r)) - sum(math.log(1 - scalar_h(n @ g, 0.2, r)) for n in negs)
    assert nce_loss(f, g, negs, cfg).item() == pytest.approx(want, rel=1e-12)


def test_nce_nonnegative_on_random_configurations():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        tau = rng.uniform(0.05, 1.0)
        cfg = LossConfig(tau=tau, negatives=3, dataset_size=int(rng.integers(3, 1000)))
        loss = nce_loss(unit(rng.normal(size=5)), unit(rng.normal(size=5)), unit(rng.normal(size=(3, 5))), cfg)
        assert loss.item() >= 0


def test_nce_decreases_as_positive_aligns():
    rng = np.random.default_rng(3)
    negs = unit(rng.normal(size=(6, 2)))
    cfg = LossConfig(negatives=6, dataset_size=60)
    # g and the negatives stay put; only f rotates toward g
    g = np.array([1.0, 0.0])
    losses = [nce_loss([math.cos(a), math.sin(a)], g, negs, cfg).item() for a in np.linspace(math.pi, 0, 50)]
    assert np.all(np.diff(losses) < 0)


def test_nce_batch_is_mean_of_singles():
    rng = np.random.default_rng(4)
    f, g, negs = unit(rng.normal(size=(3, 5))), unit(rng.normal(size=(3, 5))), unit(rng.normal(size=(3, 4, 5)))
    cfg = LossConfig(negatives=4, dataset_size=30)
    singles = [nce_loss(f[i], g[i], negs[i], cfg).item() for i in range(3)]
    assert nce_loss(f, g, negs, cfg).item() == pytest.approx(np.mean(singles), rel=1e-13)


def test_sampled_noise_is_the_normalized_estimator():
    rng = np.random.default_rng(5)
    f, g, negs = unit(rng.normal(size=6)), unit(rng.normal(size=6)), unit(rng.normal(size=(5, 6)))
    cfg = LossConfig(tau=0.4, negatives=5, dataset_size=50, noise="sampled")
    tau = cfg.tau
    z = sum(math.exp(n @ g / tau) for n in negs)

    def h(c):
        return math.exp(c / tau) / (math.exp(c / tau) + z)

    want = -math.log(h(f @ g)) - sum(math.log(1 - h(n @ g)) for n in negs)
    assert nce_loss(f, g, negs, cfg).item() == pytest.approx(want, rel=1e-12)
    # with no negatives the estimator is undefined and the fixed prior applies
    assert nce_loss(f, g, None, cfg).item() == nce_loss(f, g, None, LossConfig(tau=0.4, negatives=5, dataset_size=50)).item()


def test_sampled_noise_does_not_reward_collapse():
    # all embeddings equal versus a discriminative arrangement, tau 0.4 and 64 negatives
    rng = np.random.default_rng(6)
    d = 128
    u = unit(rng.normal(size=d))
    negs = unit(rng.normal(size=(64, d)))
    collapsed = dict(f=u, g=-u, negs=np.tile(u, (64, 1)))
    spread = dict(f=u, g=u, negs=negs)
    fixed = LossConfig(tau=0.4, negatives=64, dataset_size=600)
    sampled = LossConfig(tau=0.4, negatives=64, dataset_size=600, noise="sampled")

    def val(cfg, s):
        return nce_loss(s["f"], s["g"], s["negs"], cfg).item()

    assert val(fixed, collapsed) < val(fixed, spread)
    assert val(sampled, spread) < val(sampled, collapsed)


def test_loss_config_validation():
    with pytest.raises(LossConfigError):
        LossConfig(tau=0)
    with pytest.raises(LossConfigError):
        LossConfig(lam=-0.1)
    with pytest.raises(LossConfigError):
        LossConfig(noise="queue")
    assert LossConfig(negatives=64, dataset_size=600).ratio == 64 / 600


def test_pld_uniform_logits_give_log_k():
    cfg = LossConfig(tau=0.4)
    # embedding orthogonal to every center: all logits equal
    centers = np.eye(4)[:3]
    e = np.array([0.0, 0.0, 0.0, 1.0])
    for k_assign in range(3):
        got = pld_loss(e, e, centers, centers, k_assign, k_assign, cfg).item()
        assert got == pytest.approx(math.log(3), abs=1e-12)
    two = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    e2 = np.array([0.0, 0.0, 1.0])
    assert pld_loss(e2, e2, two, two, [[1, 0]], [[0, 1]], cfg).item() == pytest.approx(math.log(2), abs=1e-12)


def test_pld_at_center_with_antipodal_other():
    cfg = LossConfig(tau=0.4, negatives=64, dataset_size=600)
    c = np.array([[1.0, 0.0], [-1.0, 0.0]])
    e = np.array([1.0, 0.0])
    a, b = scalar_h(1.0, 0.4, cfg.ratio), scalar_h(-1.0, 0.4, cfg.ratio)
    p = math.exp(a) / (math.exp(a) + math.exp(b))
    want = -0.5 * math.log(p) - 0.5 * math.log(p)
    assert pld_loss(e, e, c, c, 0, 0, cfg).item() == pytest.approx(want, abs=1e-12)


def test_pld_term_a_decreases_along_geodesic():
    rng = np.random.default_rng(7)
    cfg = LossConfig(tau=0.4)
    centers = unit(rng.normal(size=(3, 5)))
    target = centers[1]
    start = unit(rng.normal(size=5))
    # slerp from start to the assigned center
    omega = math.acos(np.clip(start @ target, -1, 1))
    vals = []
    fixed_f = unit(rng.normal(size=5))
    # term B held fixed: same f, same patch centers and assignment
    for t in np.linspace(0, 1, 200):
        g = (math.sin((1 - t) * omega) * start + math.sin(t * omega) * target) / math.sin(omega)
        vals.append(pld_loss(fixed_f, g, centers, centers, 1, 0, cfg).item())
    assert np.all(np.diff(vals) < 0)


def test_pld_rejects_bad_assignments():
    cfg = LossConfig()
    c = np.eye(3)
    e = np.array([1.0, 0.0, 0.0])
    with pytest.raises(AssignmentError):
        pld_loss(e, e, c, c, [[0.5, 0.5, 0.0]], 0, cfg)
    with pytest.raises(AssignmentError):
        pld_loss(e, e, c, c, 3, 0, cfg)
    with pytest.raises(AssignmentError):
        pld_loss(e, e, c[:1], c[:1], 0, 0, cfg)


def test_pld_centers_get_no_gradient():
    cfg = LossConfig()
    centers = parameter(np.eye(3))
    f, g = parameter(unit([1.0, 2.0, 0.5])), parameter(unit([0.1, 1.0, 0.2]))
    backward(pld_loss(f, g, centers.data, centers.data, 0, 1, cfg))
    assert centers.grad is None
    assert np.any(f.grad != 0) and np.any(g.grad != 0)


def test_total_loss_examples_and_additivity():
    nce, pld = Tensor(0.08), Tensor(0.70)
    assert total_loss(nce, pld, 0.5).item() == pytest.approx(0.43, abs=1e-15)
    assert total_loss(nce, pld, 0.0) is nce

    rng = np.random.default_rng(8)
    cfg = LossConfig(negatives=4, dataset_size=20)
    negs = unit(rng.normal(size=(4, 5)))
    c = unit(rng.normal(size=(3, 5)))

    def grads(which):
        f, g = parameter(unit(rng_state.normal(size=5))), parameter(unit(rng_state.normal(size=5)))
        n = nce_loss(f, g, negs, cfg)
        p = pld_loss(f, g, c, c, 2, 1, cfg)
        backward({"nce": n, "pld": p, "total": total_loss(n, p, 0.5)}[which])
        return f.grad, g.grad

    out = {}
    for which in ("nce", "pld", "total"):
        rng_state = np.random.default_rng(9)
        out[which] = grads(which)
    for i in range(2):
        np.testing.assert_allclose(out["total"][i], out["nce"][i] + 0.5 * out["pld"][i], rtol=1e-12, atol=1e-15)


def test_total_with_zero_lambda_bit_matches_nce():
    rng = np.random.default_rng(10)
    cfg = LossConfig(negatives=8, dataset_size=80)
    f, g, negs = unit(rng.normal(size=(4, 16))), unit(rng.normal(size=(4, 16))), unit(rng.normal(size=(4, 8, 16)))
    separate = nce_loss(f, g, negs, cfg)
    combined = total_loss(nce_loss(f, g, negs, cfg), ops.mul(Tensor(1.0), 3.0), 0.0)
    assert combined.data.tobytes() == separate.data.tobytes()
