import numpy as np
import pytest

from hflsim.attacks import (
    LEVEL_AGGREGATOR,
    LEVEL_CLIENT,
    LEVEL_SUPERNODE,
    AttackResult,
    SuiteConfig,
    analytic_linear_inversion,
    attack_suite,
    attack_table_csv,
    batch_gradient,
    invert_gradient,
    matching_loss_and_grad,
    observe_gradient,
    ordering_holds,
)
from hflsim.datagen import LabeledBatch, gen_blobs
from hflsim.dpcore import DpPolicy
from hflsim.engine import DataSpec, EngineSpec, ExperimentConfig, TopoSpec, run_hier
from hflsim.errors import ConfigurationError
from hflsim.numkit import ClipMode, Model, backward, init_params

DATA = gen_blobs(10, 32, 20, 4.0, np.random.default_rng(0))
PRIOR = dict(prior_mean=DATA.features.mean(axis=0), prior_std=DATA.features.std(axis=0))


def one_hot(y, c=10):
    return np.eye(c)[np.asarray(y)]


@pytest.mark.parametrize("model", [Model("linear", 5, 3), Model("mlp", 5, 3, 4)])
def test_matching_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(1)
    p = init_params(model, rng).values
    x = rng.normal(size=(2, 5))
    y = one_hot([0, 2], 3) * 0.7 + 0.1
    target = rng.normal(size=p.size)
    _, gx, gy = matching_loss_and_grad(model, p, x, y, target)
    h = 1e-6
    for arr, grad in ((x, gx), (y, gy)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            e = np.zeros_like(arr)
            e[idx] = h
            up = matching_loss_and_grad(model, p, x + e if arr is x else x, y + e if arr is y else y, target)[0]
            dn = matching_loss_and_grad(model, p, x - e if arr is x else x, y - e if arr is y else y, target)[0]
            num[idx] = (up - dn) / (2 * h)
        assert np.max(np.abs(num - grad)) <= 1e-6 * max(1.0, np.max(np.abs(grad)))


def test_batch_gradient_is_sum_of_backward():
    model = Model("mlp", 32, 10, 8)
    params = init_params(model, np.random.default_rng(0))
    x, y = DATA.features[:3], DATA.labels[:3]
    ref = 3 * backward(model, params, LabeledBatch(x, y)).values
    np.testing.assert_allclose(batch_gradient(model, params.values, x, one_hot(y)), ref, rtol=1e-12, atol=1e-14)


def test_analytic_inversion_recovers_linear_input():
    model = Model("linear", 32, 10)
    params = init_params(model, np.random.default_rng(3))
    x, y = DATA.features[4:5], DATA.labels[4:5]
    grad = backward(model, params, LabeledBatch(x, y)).values
    rec = analytic_linear_inversion(model, grad)
    assert np.mean((rec - x[0]) ** 2) < 1e-6


def test_analytic_inversion_rejects_mlp_and_zero():
    with pytest.raises(ConfigurationError):
        analytic_linear_inversion(Model("mlp", 3, 2, 2), np.zeros(16))
    with pytest.raises(ConfigurationError):
        analytic_linear_inversion(Model("linear", 3, 2), np.zeros(8))


# single-run MSEs with 5 restarts and 2000 iterations, frozen with 10x slack
FROZEN_NO_NOISE_MSE = {"linear": 1.1121950085178896e-08, "mlp": 1.1343763468682865e-07}


@pytest.mark.parametrize("kind,hidden", [("linear", 0), ("mlp", 16)])
def test_gradient_matching_no_noise(kind, hidden):
    model = Model(kind, 32, 10, hidden)
    params = init_params(model, np.random.default_rng(1))
    x, y = DATA.features[1:2], DATA.labels[1:2]
    grad = batch_gradient(model, params.values, x, one_hot(y))
    rec = invert_gradient(model, params, grad, labels=y, iterations=2000, lr=0.1, rng=np.random.default_rng(2), truth=x, **PRIOR)
    assert rec.mse < 1e-3
    assert rec.mse < 10 * FROZEN_NO_NOISE_MSE[kind]
    assert rec.converged


def test_unknown_label_mode_recovers_label():
    model = Model("linear", 32, 10)
    params = init_params(model, np.random.default_rng(1))
    x, y = DATA.features[2:3], DATA.labels[2:3]
    grad = batch_gradient(model, params.values, x, one_hot(y))
    rec = invert_gradient(model, params, grad, labels=None, batch_size=1, rng=np.random.default_rng(2), truth=x, **PRIOR)
    assert rec.labels.tolist() == y.tolist()
    assert rec.mse < 1e-2


def test_zero_observation_returns_prior():
    model = Model("linear", 32, 10)
    params = init_params(model, np.random.default_rng(1))
    x = DATA.features[:1]
    rec = invert_gradient(model, params, np.zeros(model.num_params), labels=[0], truth=x, **PRIOR)
    assert not rec.converged
    np.testing.assert_array_equal(rec.x[0], PRIOR["prior_mean"])
    # squared distance to the data mean; averaged over the dataset it is the total variance
    mses = [np.mean((row - PRIOR["prior_mean"]) ** 2) for row in DATA.features]
    assert np.mean(mses) == pytest.approx(np.mean(DATA.features.var(axis=0)), rel=1e-12)


def test_mse_monotone_in_observation_noise():
    model = Model("linear", 32, 10)
    params = init_params(model, np.random.default_rng(1))
    x, y = DATA.features[:1], DATA.labels[:1]
    grad = batch_gradient(model, params.values, x, one_hot(y))
    noise = np.random.default_rng(5).standard_normal(grad.size)
    mses = [
        invert_gradient(model, params, grad + s * noise, labels=y, rng=np.random.default_rng(2), truth=x, **PRIOR).mse
        for s in (0.0, 0.01, 0.1, 1.0)
    ]
    assert mses == sorted(mses)


def test_restart_determinism():
    model = Model("mlp", 32, 10, 8)
    params = init_params(model, np.random.default_rng(1))
    x, y = DATA.features[:1], DATA.labels[:1]
    grad = batch_gradient(model, params.values, x, one_hot(y)) + 0.05
    a = invert_gradient(model, params, grad, labels=y, iterations=200, rng=np.random.default_rng(9), truth=x)
    b = invert_gradient(model, params, grad, labels=y, iterations=200, rng=np.random.default_rng(9), truth=x)
    assert a.x.tobytes() == b.x.tobytes()


def traced(placement="none", z=0.0, clients=2, zones=1, secure_agg=False, seed=0):
    cfg = ExperimentConfig(
        data=DataSpec(classes=4, dim=6, per_class=20),
        topo=TopoSpec(clients=clients, zones=zones, q=1.0),
        dp=DpPolicy(placement, ClipMode("flat", 10.0), z=z),
        engine=EngineSpec(rounds=1, client_lr=0.1, batch_size=1, secure_agg=secure_agg, denominator="realized"),
        seed=seed,
    )
    return run_hier(cfg, record_trace=True).trace


def test_level0_subtraction_recovers_other_client():
    tr = traced()
    obs = observe_gradient(tr, LEVEL_CLIENT, 0, target=1, adversary=0)
    truth = tr[0].weights[1] * tr[0].sent[1] / tr[0].denom_total
    # equal up to one rounding of each of the few float operations involved
    np.testing.assert_allclose(obs.values, truth, rtol=1e-15, atol=4 * np.finfo(float).eps * np.max(np.abs(truth)))
    assert obs.contributors == [1]


def test_level0_needs_online_adversary():
    tr = traced()
    with pytest.raises(ConfigurationError):
        observe_gradient(tr, LEVEL_CLIENT, 0, target=1, adversary=None)


def test_level1_with_secure_agg_sees_only_zone_sum():
    tr = traced(clients=6, zones=2, secure_agg=True)
    obs = observe_gradient(tr, LEVEL_SUPERNODE, 0, target=1)
    assert obs.aggregate_only
    zone = next(i for i, o in enumerate(tr[0].online) if 1 in o)
    np.testing.assert_array_equal(obs.values, tr[0].zone_sums[zone])
    for c in obs.contributors:
        assert not np.allclose(obs.values, tr[0].weights[c] * tr[0].sent[c])


def test_level1_ldp_observation_variance():
    residuals = []
    for seed in range(300):
        tr = traced("C1", z=0.2, clients=4, zones=2, seed=seed)
        obs = observe_gradient(tr, LEVEL_SUPERNODE, 0, target=2)
        assert not obs.aggregate_only
        residuals.append(obs.values / tr[0].weights[2] - tr[0].clean[2])
    var = np.array(residuals).var(axis=0).mean()
    assert var == pytest.approx((0.2 * 10.0) ** 2, rel=0.05)


def test_level2_sees_zone_output():
    tr = traced("C2", z=0.5, clients=6, zones=2)
    obs = observe_gradient(tr, LEVEL_AGGREGATOR, 0, target=3)
    zone = next(i for i, o in enumerate(tr[0].online) if 3 in o)
    np.testing.assert_array_equal(obs.values, tr[0].zone_outputs[zone])


def test_suite_degenerate_without_noise():
    sc = SuiteConfig(z=0.0, targets=2, iterations=300, restarts=1)
    results = attack_suite(sc)
    mses = [r.mse for r in results]
    assert all(m == mses[0] for m in mses)


def test_suite_ordering_and_table():
    # medians over fewer than ~10 targets are too noisy to separate C2 from C1
    results = attack_suite(SuiteConfig(z=0.003, targets=10, iterations=1000, restarts=2))
    assert ordering_holds(results)
    med = {r.placement: r.median_mse for r in results}
    assert med["none"] == min(med.values()) and med["C1"] == max(med.values())
    table = attack_table_csv(results).splitlines()
    assert table[0] == "dataset,LDP,HDP,CDP,NoDP"
    assert table[1].startswith("blobs,")


def test_ordering_violation_detected():
    fake = [AttackResult(0, p, [m], [1], [True]) for p, m in (("none", 0.5), ("C4", 0.1), ("C2", 0.2), ("C1", 0.3))]
    assert not ordering_holds(fake)
