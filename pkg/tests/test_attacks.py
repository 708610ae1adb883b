import math

import numpy as np
import pytest

from specattack import attacks as A
from specattack.attacks import (
    Algorithm,
    AttackSpec,
    Norm,
    StalledAttackError,
    ZeroGradientError,
    bim,
    bim_step_size,
    box_lbfgs,
    clip_region,
    cw_l2,
    cw_margin,
    deepfool,
    deepfool_step,
    fgsm,
    fgsm_minimal_epsilon,
    from_tanh_space,
    jsma,
    jsma_iterations,
    lbfgs_attack,
    lbfgs_objective,
    outcomes_from_jsonl,
    outcomes_to_jsonl,
    run_attack,
    run_budget_sweep,
    saliency_map,
    select_targets,
    to_tanh_space,
)
from specattack.nn import LinearClassifier, ResNetMini, ResNetMiniConfig, TrainHyper
from specattack.nn.train import fit

from oracles import binary_linear, brute_saliency, small_resnet, softmax_jacobian_linear


def _fresh_predict_consistent(model, outcomes):
    for o in outcomes:
        pred, _ = model.predict(o.x_adv[None])
        assert pred[0] == o.predicted
        if o.target is not None:
            assert o.success == (o.predicted == o.target)
        else:
            assert o.success == (o.predicted != o.original_label)


# -- specs -----------------------------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec(Algorithm.JSMA)
    with pytest.raises(ValueError):
        AttackSpec(Algorithm.LBFGS)
    with pytest.raises(ValueError):
        AttackSpec(Algorithm.FGSM, epsilon=-1)
    with pytest.raises(ValueError):
        AttackSpec(Algorithm.JSMA, targeted=True, gamma=2 / 255)
    with pytest.raises(ValueError):
        AttackSpec(Algorithm.FGSM, norm=Norm.L0)
    with pytest.raises(ValueError):
        AttackSpec(Algorithm.BIM_A, max_iter=0)


def test_spec_budget_and_roundtrip():
    assert AttackSpec(Algorithm.FGSM, epsilon=2.5).budget == 2.5
    assert AttackSpec(Algorithm.CW_L2, max_iter=100, c_search_steps=3).budget == 300
    assert AttackSpec(Algorithm.DEEPFOOL, max_iter=100).budget == 100
    s = AttackSpec("BIM-b", norm="linf", epsilon=4, max_iter=7)
    assert AttackSpec.from_dict(s.to_dict()) == s


# -- clip_region -------------------------------------------------------------------------


def test_clip_region_examples():
    assert clip_region(np.array([100.0]), np.array([98.0]), 5)[0] == 100.0
    assert clip_region(np.array([265.0]), np.array([250.0]), 10)[0] == 255.0
    assert clip_region(np.array([-7.0]), np.array([3.0]), 10)[0] == 0.0


def test_clip_region_matches_nested_min_max():
    rng = np.random.default_rng(0)
    for _ in range(500):
        x = rng.uniform(0, 255)
        d = rng.uniform(0, 40)
        xc = rng.uniform(-60, 320)
        ref = min(255.0, x + d, max(0.0, x - d, xc))
        assert clip_region(np.array([xc]), np.array([x]), d)[0] == ref
    with pytest.raises(ValueError):
        clip_region(np.zeros(1), np.zeros(1), -1)


# -- FGSM / BIM ---------------------------------------------------------------------------


def _two_pixel():
    # z0 = 0, z1 = x0 - x1 in pixel units, so the class-1 logit margin is linear with w = (1, -1)
    return LinearClassifier(np.array([[0.0, 255.0], [0.0, -255.0]]), np.zeros(2))


def test_fgsm_linear_two_pixel():
    model = _two_pixel()
    x = np.array([100.0, 120.0])
    o = fgsm(model, x, 0, AttackSpec(Algorithm.FGSM, epsilon=3))
    assert np.array_equal(o.x_adv, x + np.array([3.0, -3.0]))
    margin = lambda v: v[0] - v[1]  # noqa: E731
    assert margin(o.x_adv) - margin(x) == 3 * 2  # 3 * ||w||_1
    assert o.gradient_cost == 1 and model.gradient_meter == 1


def test_fgsm_zero_epsilon_identity():
    model = _two_pixel()
    x = np.array([[100.0, 120.0], [120.0, 100.0]])
    out = fgsm(model, x, [0, 0], AttackSpec(Algorithm.FGSM, epsilon=0))
    assert all(np.array_equal(o.x_adv, xi) for o, xi in zip(out, x))
    assert [o.success for o in out] == [False, True]


def test_fgsm_l2_zero_gradient():
    model = LinearClassifier(np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ZeroGradientError):
        fgsm(model, np.array([1.0, 2.0]), 0, AttackSpec(Algorithm.FGSM, norm=Norm.L2, epsilon=1))
    out = fgsm(model, np.ones((2, 2)), [0, 1], AttackSpec(Algorithm.FGSM, norm=Norm.L2, epsilon=1))
    assert [o.error for o in out] == ["zero-gradient"] * 2


def test_fgsm_batch_cost_is_one_unit():
    model = small_resnet(0)
    x = np.random.default_rng(1).uniform(0, 255, (5, 8, 8))
    out = fgsm(model, x, [0, 1, 2, 0, 1], AttackSpec(Algorithm.FGSM, epsilon=2))
    assert model.gradient_meter == 1
    assert all(o.gradient_cost == 1 for o in out)
    _fresh_predict_consistent(model, out)


def test_fgsm_targeted_descends_target_loss():
    model = _two_pixel()
    x = np.array([100.0, 120.0])
    o = fgsm(model, x, 0, AttackSpec(Algorithm.FGSM, targeted=True, epsilon=15), targets=1)
    assert np.array_equal(o.x_adv, x + np.array([15.0, -15.0]))
    assert o.success and o.target == 1


def test_bim_equals_fgsm_on_linear():
    model = _two_pixel()
    x = np.array([[100.0, 120.0], [30.0, 60.0]])
    f = fgsm(model, x, [0, 0], AttackSpec(Algorithm.FGSM, epsilon=3))
    b = bim(model, x, [0, 0], AttackSpec(Algorithm.BIM_B, epsilon=3, max_iter=10))
    for of, ob in zip(f, b):
        assert np.allclose(of.x_adv, ob.x_adv, atol=1e-9)
        assert ob.gradient_cost == 10


def test_bim_step_size_rule():
    assert bim_step_size(AttackSpec(Algorithm.BIM_A, epsilon=8, max_iter=4)) == 2.0
    assert bim_step_size(AttackSpec(Algorithm.BIM_A, epsilon=8, max_iter=20)) == 0.8


def test_bim_a_cost_le_bim_b_and_box():
    model = small_resnet(2)
    rng = np.random.default_rng(3)
    x = rng.uniform(0, 255, (6, 8, 8))
    y = model.predict(x)[0]
    for eps in (1.0, 8.0, 40.0):
        a = bim(model, x, y, AttackSpec(Algorithm.BIM_A, epsilon=eps, max_iter=8))
        b = bim(model, x, y, AttackSpec(Algorithm.BIM_B, epsilon=eps, max_iter=8))
        for oa, ob, xi in zip(a, b, x):
            assert oa.gradient_cost <= ob.gradient_cost
            for o in (oa, ob):
                assert np.all(o.x_adv >= np.maximum(0, xi - eps) - 1e-9)
                assert np.all(o.x_adv <= np.minimum(255, xi + eps) + 1e-9)
        _fresh_predict_consistent(model, a + b)


# -- JSMA ------------------------------------------------------------------------------------


def test_jsma_iterations_formula():
    assert jsma_iterations(128 * 128, 1.5 / 255, 40) == math.ceil(16384 * 1.5 / 40)
    assert jsma_iterations(9, 1.5 / 255, 200) == 1
    with pytest.raises(ValueError):
        jsma_iterations(9, 1.5 / 255, 0)


def test_saliency_zeroing_rule():
    jac = np.array([[1.0, -1.0, 2.0, 0.5], [-2.0, 0.5, -1.0, -0.2], [0.5, 0.0, -0.5, -0.1]])
    s = saliency_map(jac, 0)
    # pixel 1: target derivative negative; pixel 0: others sum -1.5 -> kept
    assert s[1] == 0.0
    assert s[0] == 1.0 * 1.5 and s[2] == 2.0 * 1.5 and s[3] == pytest.approx(0.5 * 0.3)
    assert np.array_equal(s, brute_saliency(jac, 0))


@pytest.mark.parametrize("seed", range(6))
def test_jsma_picks_brute_force_argmax_3x3(seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((9, 3)) * 2  # keeps the softmax away from saturation
    b = rng.standard_normal(3)
    model = LinearClassifier(W, b, input_shape=(3, 3))
    x = rng.uniform(50, 200, (3, 3))
    label = int(model.predict(x[None])[0][0])
    target = (label + 1) % 3
    sal = brute_saliency(softmax_jacobian_linear(W, b, x), target)
    spec = AttackSpec(Algorithm.JSMA, targeted=True, max_iter=1)
    if not np.any(sal > 0):
        with pytest.raises(StalledAttackError):
            jsma(model, x, label, spec, target)
        return
    o = jsma(model, x, label, spec, target)
    changed = np.flatnonzero(o.x_adv.ravel() != x.ravel())
    assert changed.tolist() == [int(np.argmax(sal))]
    assert o.x_adv.ravel()[changed[0]] - x.ravel()[changed[0]] == pytest.approx(1.5)


def test_jsma_l0_and_cost_bounds():
    model = small_resnet(4)
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 255, (4, 8, 8))
    y = model.predict(x)[0]
    t = (y + 1) % 3
    spec = AttackSpec(Algorithm.JSMA, targeted=True, max_iter=12)
    out = jsma(model, x, y, spec, t)
    for o, xi in zip(out, x):
        assert o.l0 <= o.iterations <= 12
        assert np.all(np.abs(o.x_adv - xi) <= spec.gamma * 255 * o.iterations + 1e-9)
        assert 0 <= o.x_adv.min() and o.x_adv.max() <= 255
    _fresh_predict_consistent(model, out)


# -- CW --------------------------------------------------------------------------------------


def test_tanh_space_identity():
    x = np.array([0.0, 1e-3, 17.0, 128.0, 254.999, 255.0])
    assert np.max(np.abs(from_tanh_space(to_tanh_space(x)) - x / 255)) <= 1e-6 + 1e-12


def test_cw_margin_floor():
    z = np.array([[5.0, 1.0, 0.0], [1.0, 1.5, 0.0], [0.0, 3.0, 2.0]])
    f, _, _, _ = cw_margin(z, np.array([0, 0, 0]), np.array([1, 1, 1]), kappa=0.4)
    assert np.all(f >= -0.4)
    # row 1: target beats runner-up by 0.5 >= kappa -> exactly -kappa; row 2: by 1.0
    assert f[1] == -0.4 and f[2] == -0.4
    assert f[0] == 4.0
    g, _, _, _ = cw_margin(z, np.array([0, 0, 0]), None, kappa=0.0)
    assert g.tolist() == [4.0, 0.0, 0.0]


def test_cw_beats_nothing_below_hyperplane_distance():
    rng = np.random.default_rng(6)
    model, x, w, f = binary_linear(rng, (4, 4), distance=6.0)
    o = cw_l2(model, x, 0, AttackSpec(Algorithm.CW_L2, max_iter=200, c_search_steps=4, learning_rate=0.01))
    assert o.success
    # the exact l2 distance to the decision boundary is a hard lower bound
    assert o.l2 >= 6.0 - 1e-6
    assert o.gradient_cost == o.iterations


def test_cw_failure_returns_outcome():
    model = LinearClassifier(np.zeros((4, 2)), np.array([5.0, 0.0]), input_shape=(2, 2))
    o = cw_l2(model, np.full((2, 2), 100.0), 0, AttackSpec(Algorithm.CW_L2, max_iter=5))
    assert not o.success
    assert 0 <= o.x_adv.min() and o.x_adv.max() <= 255


# -- DeepFool -------------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_deepfool_one_step_closed_form(seed):
    rng = np.random.default_rng(seed)
    model, x, w, f = binary_linear(rng, (5, 5), distance=rng.uniform(1, 10))
    logits, jac = model.jacobian_input(x[None], "logits")
    step = deepfool_step(logits[0], jac[0], 0)
    expected = -f * w / np.sum(w * w)
    assert np.max(np.abs(step - expected)) < 1e-6
    o = deepfool(model, x, 0, AttackSpec(Algorithm.DEEPFOOL, max_iter=100))
    assert o.iterations == 1 and o.success
    assert np.allclose(o.x_adv, x + 1.02 * expected, atol=1e-9)


def test_deepfool_already_on_target_side():
    model, x, w, f = binary_linear(np.random.default_rng(7), (3, 3), distance=-2.0)
    o = deepfool(model, x, 1, AttackSpec(Algorithm.DEEPFOOL, targeted=True, max_iter=50), targets=1)
    assert o.iterations == 0 and o.l2 == 0.0 and o.success


def test_deepfool_fgsm_l2_and_distance_agree():
    rng = np.random.default_rng(8)
    for _ in range(5):
        d = rng.uniform(0.5, 15)
        model, x, w, f = binary_linear(rng, (6, 6), distance=d)
        eps = fgsm_minimal_epsilon(model, x, 0, tol=1e-10)[0]
        step = deepfool_step(*[a[0] for a in model.jacobian_input(x[None], "logits")], 0)
        assert abs(eps - d) < 1e-4
        assert abs(np.linalg.norm(step) - d) < 1e-6


def test_fgsm_minimal_epsilon_inf_when_unreachable():
    model = LinearClassifier(np.zeros((4, 2)), np.array([5.0, 0.0]), input_shape=(2, 2))
    model.weight.data[0, 1] = 1e-9
    assert np.isinf(fgsm_minimal_epsilon(model, np.full((2, 2), 100.0), 0)[0])


# -- L-BFGS ---------------------------------------------------------------------------------


def test_box_lbfgs_quadratic_closed_form():
    rng = np.random.default_rng(9)
    d = rng.uniform(0.5, 3, 20)
    a = rng.uniform(-100, 350, 20)
    fun = lambda v: (0.5 * np.sum(d * (v - a) ** 2), d * (v - a))  # noqa: E731
    xs, evals = box_lbfgs(fun, np.full(20, 128.0), maxiter=200)
    assert np.max(np.abs(xs - np.clip(a, 0, 255))) < 1e-4
    assert evals > 0


def test_lbfgs_objective_prox_closed_form():
    # c ||x' - x|| + 0.5 ||x' - t||^2 has minimizer x + max(0, 1 - c / ||t - x||) (t - x)
    rng = np.random.default_rng(10)
    x = rng.uniform(60, 190, 12)
    t = x + rng.uniform(-30, 30, 12)
    for c in (0.5, 5.0, 30.0, 1e4):
        def fun(v):
            dv = v - x
            n = np.linalg.norm(dv)
            return c * n + 0.5 * np.sum((v - t) ** 2), (c * dv / n if n > 0 else 0) + (v - t)

        xs, _ = box_lbfgs(fun, x + 1e-3, maxiter=500)
        shrink = max(0.0, 1 - c / np.linalg.norm(t - x))
        assert np.max(np.abs(xs - (x + shrink * (t - x)))) < 1e-4


def test_lbfgs_huge_c_stays_at_input():
    model = small_resnet(5)
    x = np.random.default_rng(11).uniform(0, 255, (8, 8))
    y = int(model.predict(x[None])[0][0])
    target = (y + 1) % 3
    xs, _ = box_lbfgs(lbfgs_objective(model, x, target, 1e6), x, maxiter=20)
    assert np.max(np.abs(xs - x)) < 1e-3
    assert model.predict(xs[None])[0][0] == y


def test_lbfgs_attack_linear_targeted():
    rng = np.random.default_rng(12)
    model, x, w, f = binary_linear(rng, (4, 4), distance=5.0)
    o = lbfgs_attack(model, x, 0, AttackSpec(Algorithm.LBFGS, targeted=True, max_iter=30, c_search_steps=4), 1)
    assert o.success and o.target == 1
    assert o.l2 >= 5.0 - 1e-6
    assert 0 <= o.x_adv.min() and o.x_adv.max() <= 255
    assert o.gradient_cost > 0


# -- sweeps -----------------------------------------------------------------------------------


def test_select_targets_wrong_and_deterministic():
    labels = np.arange(300) % 4
    t1 = select_targets(labels, 4, 7)
    assert np.all(t1 != labels)
    assert np.array_equal(t1, select_targets(labels, 4, 7))
    assert set(np.unique(t1)) == {0, 1, 2, 3}


def test_sweep_counts_meters_and_targets():
    model = small_resnet(6)
    x = np.random.default_rng(13).uniform(0, 255, (7, 8, 8))
    y = model.predict(x)[0]
    res = run_budget_sweep(model, x, y, [AttackSpec(Algorithm.FGSM, epsilon=4)], seed=3, batch_size=3)
    assert len(res.outcomes) == 7
    assert res.meter == [3]  # three batches, one unit each
    assert [o.sample_index for o in res.outcomes] == list(range(7))
    again = run_budget_sweep(model, x, y, [AttackSpec(Algorithm.FGSM, epsilon=4)], seed=3, batch_size=3, workers=3)
    assert np.array_equal(res.targets, again.targets)
    assert outcomes_to_jsonl(res.outcomes) == outcomes_to_jsonl(again.outcomes)


def test_sweep_never_aborts(monkeypatch):
    model = small_resnet(7)
    x = np.random.default_rng(14).uniform(0, 255, (4, 8, 8))

    def boom(*a, **k):
        raise RuntimeError("kaput")

    monkeypatch.setitem(A._ATTACKS, Algorithm.BIM_A, boom)
    specs = [AttackSpec(Algorithm.BIM_A, epsilon=1), AttackSpec(Algorithm.FGSM, epsilon=1)]
    res = run_budget_sweep(model, x, [0, 1, 2, 0], specs, batch_size=2)
    assert len(res.outcomes) == 8
    failed = [o for o in res.outcomes if o.spec_index == 0]
    assert all(not o.success and "kaput" in o.error for o in failed)
    with pytest.raises(ValueError):
        run_budget_sweep(model, x, [0, 1, 2, 0], [])


def test_outcome_jsonl_roundtrip():
    model = small_resnet(8)
    x = np.random.default_rng(15).uniform(0, 255, (3, 8, 8))
    out = run_attack(model, x, [0, 1, 2], AttackSpec(Algorithm.FGSM, epsilon=2))
    text = outcomes_to_jsonl(out)
    back = outcomes_from_jsonl(text, payload=np.stack([o.x_adv for o in out]))
    assert outcomes_to_jsonl(back) == text
    assert np.array_equal(back[1].x_adv, out[1].x_adv)


# -- FGSM monotonicity on a trained model -----------------------------------------------------------


def _stripes(n, seed):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(3):
        for _ in range(n):
            img = rng.uniform(0, 60, (12, 12))
            img[4 * c:4 * c + 4] += 140
            xs.append(np.clip(img, 0, 255))
            ys.append(c)
    return np.array(xs), np.array(ys)


@pytest.mark.parametrize("seed", range(3))
def test_fgsm_success_monotone_in_epsilon(seed):
    x, y = _stripes(12, seed)
    cfg = ResNetMiniConfig(classes=3, input_shape=(12, 12), stem_channels=4, stages=((1, 6, 2),), seed=seed)
    model = ResNetMini(cfg)
    fit(model, x, y, TrainHyper(learning_rate=0.05, batch_size=6), 8, np.random.default_rng(seed))
    grid = [0.001 * 255 * k for k in (1, 2, 5, 10, 20, 50, 100)]
    rates = []
    for eps in grid:
        out = fgsm(model, x, y, AttackSpec(Algorithm.FGSM, epsilon=eps))
        rates.append(np.mean([o.success for o in out]))
    drops = [max(0.0, rates[i] - rates[i + 1]) for i in range(len(rates) - 1)]
    assert max(drops) <= 0.02
