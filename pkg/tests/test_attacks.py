import numpy as np
import pytest

from fdialab import estimation, fdia
from fdialab.attacks import (AttackConfig, attack_loss, build_variant,
                             constraints_satisfied, objective_gradient,
                             perturbation_metrics, run_attack,
                             sample_uncontrolled_meters)
from fdialab.errors import ContractError
from fdialab.fdia import FdiaSpec, GenerationConfig, generate_dataset, random_fdia
from fdialab.neural import (NalModel, TrainConfig, default_architecture,
                            standardization_from, train_on_dataset)
from fdialab.rng import derive_rng


def make_spec(grid, c):
    c = np.asarray(c, dtype=float)
    return FdiaSpec(c=c, a=grid.h_matrix @ c,
                    target_indices=tuple(int(i) for i in np.flatnonzero(c)),
                    scale_variance=0.02)


@pytest.fixture(scope="module")
def lab14():
    """Calibrated case14 grid plus a quickly trained small locator; good
    enough for attack semantics, not for accuracy claims."""
    from fdialab import gridcase
    raw = gridcase.parse_matpower_case(gridcase.load_bundled_case("case14"))
    grid = gridcase.build_grid_model(raw)
    grid = fdia.calibrate_noise(
        grid, fdia.calibration_pool(grid, 150, derive_rng(3, "cal")))
    ds = generate_dataset(grid, GenerationConfig(
        n_normal=900, n_attacked_per_scale=300, seed=17))
    tr, te = ds.split_indices()
    mean, std = standardization_from(ds.z[tr])
    model = NalModel.initialize(
        default_architecture(grid.n_meter, grid.n_bus, widths=(8, 16, 16, 16)),
        mean, std, derive_rng(5, "init"), "case14")
    train_on_dataset(model, ds, TrainConfig(epochs=6, batch_size=32, seed=5))
    return grid, model, ds


# ---------------------------------------------------------------------------
# variant construction
# ---------------------------------------------------------------------------

def test_variant_untargeted_full_hiding(grid14_cal):
    spec = make_spec(grid14_cal, np.eye(13)[2] * 0.3)
    v = build_variant("lesson2", spec)
    assert v.set_b == tuple(range(34))
    np.testing.assert_array_equal(v.mask, np.ones(13))
    assert not v.require_targeted


def test_variant_targeted_support_only(grid3_cal):
    spec = make_spec(grid3_cal, [0.2, 0.0])
    v = build_variant("lesson3", spec)
    # c touches state 0 (bus 2): meters 0,1,2,3,4 minus structural zeros
    assert v.set_b == tuple(np.flatnonzero(np.abs(spec.a) > 1e-8))
    np.testing.assert_array_equal(v.mask, [0.0, 1.0])
    assert v.require_targeted


def test_mask_is_indicator_of_zero_entries():
    c = np.array([0.5, 0.0, -0.2])
    spec = FdiaSpec(c=c, a=np.ones(5), target_indices=(0, 2), scale_variance=0.02)
    v = build_variant("lesson4", spec)
    np.testing.assert_array_equal(v.mask, [0.0, 1.0, 0.0])
    v1 = build_variant("lesson1", spec)
    np.testing.assert_array_equal(v1.mask, [1.0, 1.0, 1.0])


def test_variant_set_clash_rejected(grid3_cal):
    spec = make_spec(grid3_cal, [0.2, 0.0])
    with pytest.raises(ContractError, match="overlap"):
        build_variant("lesson2", spec, set_a=(3,))


def test_unknown_variant_rejected(grid3_cal):
    spec = make_spec(grid3_cal, [0.2, 0.0])
    with pytest.raises(ContractError):
        build_variant("lesson9", spec)


# ---------------------------------------------------------------------------
# hinge objective
# ---------------------------------------------------------------------------

def _spec_with(set_a, set_b, n_state=3):
    return build_variant("lesson1",
                         FdiaSpec(c=np.ones(n_state), a=_a_for(set_b),
                                  target_indices=(0,), scale_variance=0.02),
                         set_a=set_a)


def _a_for(set_b, m=6):
    a = np.zeros(m)
    for j in set_b:
        a[j] = 1.0
    return a


def test_loss_satisfied_constraint_is_zero():
    spec = _spec_with((), (3,))
    loss, grad = attack_loss(np.array([0.0, 0, 0, -1.0, 0, 0]), spec)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_loss_violated_b_is_logit():
    spec = _spec_with((), (3,))
    loss, grad = attack_loss(np.array([0.0, 0, 0, 2.0, 0, 0]), spec)
    assert loss == 2.0
    assert grad[3] == 1.0


def test_loss_violated_a_is_negative_logit():
    spec = _spec_with((1,), (3,))
    loss, grad = attack_loss(np.array([0.0, -0.5, 0, -1.0, 0, 0]), spec)
    assert loss == 0.5
    assert grad[1] == -1.0


# ---------------------------------------------------------------------------
# run_attack semantics
# ---------------------------------------------------------------------------

def test_already_satisfying_sample_succeeds_at_zero(grid14_cal):
    # all-zero parameters: every logit is 0, every label 0, so any lesson2
    # target (all meters normal) is satisfied before the first step
    arch = default_architecture(34, 14, widths=(4, 4, 4, 4))
    model = NalModel.initialize(arch, np.zeros(34), np.ones(34),
                                derive_rng(0, "z"), "case14")
    model.set_parameters({k: np.zeros_like(v)
                          for k, v in model.parameters().items()})
    rng = np.random.default_rng(1)
    _, x = fdia.sample_state(grid14_cal, rng)
    z = fdia.make_measurements(grid14_cal, x, rng)
    spec = random_fdia(grid14_cal, 0.02, rng)
    result = run_attack(model, grid14_cal, z + spec.a, spec,
                        AttackConfig(variant="lesson2", lr=1e-3))
    assert result.success
    assert result.iterations_used == 0
    np.testing.assert_array_equal(result.zeta, 0.0)
    np.testing.assert_array_equal(result.theta, 0.0)
    np.testing.assert_array_equal(result.z_f, z + spec.a)


def _attack_batch(lab14, variant, n=12, uncontrolled_frac=0.0, mu=1.0,
                  max_iter=120, objective_mode="hinge"):
    grid, model, ds = lab14
    rng = np.random.default_rng(77)
    results = []
    pool = list(ds.attacks.items())[:n]
    for i, spec in pool:
        uncontrolled = frozenset()
        if uncontrolled_frac:
            uncontrolled = sample_uncontrolled_meters(
                spec, uncontrolled_frac, rng)
        config = AttackConfig(variant=variant, mu=mu, lr=5e-3,
                              max_iter=max_iter, seed=int(i),
                              uncontrolled_meters=uncontrolled,
                              objective_mode=objective_mode,
                              record_trace=True)
        results.append((spec, ds.z[i], run_attack(model, grid, ds.z[i], spec, config)))
    return results


def test_attack_respects_box_constraint(lab14):
    # strict interior: tanh never reaches +-1, so |zeta| < mu elementwise
    for variant in ("lesson1", "lesson4"):
        for spec, z_a, result in _attack_batch(lab14, variant, n=8):
            assert np.max(np.abs(result.zeta)) < 1.0


def test_attack_stealth_without_projection(lab14):
    grid, model, ds = lab14
    for spec, z_a, result in _attack_batch(lab14, "lesson1", n=10):
        s0 = estimation.bdd_statistic(grid, z_a)
        assert abs(result.bdd_statistic_final - s0) <= 1e-9 * (1 + s0)
        # z_f = z_a + H zeta exactly when nothing is projected
        np.testing.assert_allclose(
            result.z_f, z_a + grid.h_matrix @ result.zeta, atol=1e-12)
        np.testing.assert_allclose(result.theta, grid.h_matrix @ result.zeta,
                                   atol=1e-12)


def test_success_predicate_matches_labels(lab14):
    grid, model, ds = lab14
    any_success = False
    for spec, z_a, result in _attack_batch(lab14, "lesson1", n=12):
        variant = build_variant("lesson1", spec)
        labels = model.predict_labels(result.z_f)
        np.testing.assert_array_equal(labels, result.predicted_labels)
        if result.success:
            any_success = True
            assert constraints_satisfied(labels, variant)
    assert any_success, "tiny locator should be beatable on some samples"


def test_targeted_attack_preserves_estimation_error(lab14):
    grid, model, ds = lab14
    checked = 0
    for variant in ("lesson3", "lesson4"):
        for spec, z_a, result in _attack_batch(lab14, variant, n=10):
            # mask must freeze the targeted states exactly
            np.testing.assert_array_equal(
                result.zeta[list(spec.target_indices)], 0.0)
            if not result.success:
                continue
            z_clean = z_a - spec.a
            shift = (estimation.wls_estimate(grid, result.z_f)
                     - estimation.wls_estimate(grid, z_clean))
            np.testing.assert_allclose(shift[list(spec.target_indices)],
                                       spec.c[list(spec.target_indices)],
                                       atol=1e-8)
            checked += 1
    assert checked > 0, "need at least one successful targeted run"


def test_projection_zeroes_uncontrolled_meters(lab14):
    grid, model, ds = lab14
    for spec, z_a, result in _attack_batch(lab14, "lesson1", n=8,
                                           uncontrolled_frac=0.5):
        support = set(int(j) for j in spec.support)
        touched = np.flatnonzero(result.z_f != z_a)
        uncontrolled = [j for j in range(grid.n_meter)
                        if j not in support and result.theta[j] == 0.0]
        # at least half of the non-essential meters were frozen
        assert len(uncontrolled) >= (grid.n_meter - len(support)) // 2
        assert set(touched).isdisjoint(
            set(range(grid.n_meter)) - support - set(np.flatnonzero(result.theta)))


def test_sample_uncontrolled_excludes_support(grid14_cal):
    rng = np.random.default_rng(5)
    spec = random_fdia(grid14_cal, 0.1, rng)
    chosen = sample_uncontrolled_meters(spec, 0.5, rng)
    support = set(int(j) for j in spec.support)
    assert chosen.isdisjoint(support)
    assert len(chosen) == round(0.5 * (34 - len(support)))


def test_trace_records_iterations(lab14):
    grid, model, ds = lab14
    spec, z_a, result = _attack_batch(lab14, "lesson2", n=1, max_iter=30)[0]
    assert result.trace is not None
    iterations = [row[0] for row in result.trace]
    assert iterations == list(range(len(iterations)))
    losses = [row[1] for row in result.trace]
    assert all(np.isfinite(losses))
    violations = [row[3] for row in result.trace]
    if result.success:
        assert violations[-1] == 0


def test_penalty_mode_adds_norm_term(lab14):
    grid, model, ds = lab14
    i, spec = next(iter(ds.attacks.items()))
    variant = build_variant("lesson1", spec)
    config_h = AttackConfig(variant="lesson1", lr=1e-3, objective_mode="hinge")
    config_p = AttackConfig(variant="lesson1", lr=1e-3,
                            objective_mode="penalty", penalty_lambda=2.5)
    varpi = 0.3 * np.ones(grid.n_state)
    s_h = objective_gradient(model, grid, ds.z[i], variant, config_h, varpi)
    s_p = objective_gradient(model, grid, ds.z[i], variant, config_p, varpi)
    assert s_p.loss == pytest.approx(
        s_h.loss + 2.5 * np.linalg.norm(s_p.zeta), rel=1e-12)


# ---------------------------------------------------------------------------
# gradient chain through the whole composite map
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("variant,uncontrolled,mode", [
    ("lesson1", frozenset(), "hinge"),
    ("lesson4", frozenset(), "penalty"),
    ("lesson2", frozenset({0, 5, 11}), "hinge"),
])
def test_objective_gradient_matches_finite_differences(lab14, variant,
                                                       uncontrolled, mode):
    grid, model, ds = lab14
    i, spec = next(iter(ds.attacks.items()))
    vspec = build_variant(variant, spec)
    config = AttackConfig(variant=variant, lr=1e-3, mu=0.7,
                          uncontrolled_meters=uncontrolled,
                          objective_mode=mode, penalty_lambda=1.3)
    rng = np.random.default_rng(123)
    varpi = 0.4 * rng.standard_normal(grid.n_state)

    state = objective_gradient(model, grid, ds.z[i], vspec, config, varpi)
    step = 1e-5
    for k in range(grid.n_state):
        up = varpi.copy()
        up[k] += step
        down = varpi.copy()
        down[k] -= step
        numeric = (objective_gradient(model, grid, ds.z[i], vspec, config, up).loss
                   - objective_gradient(model, grid, ds.z[i], vspec, config, down).loss
                   ) / (2 * step)
        analytic = state.grad_varpi[k]
        err = abs(numeric - analytic)
        assert err <= 1e-7 + 1e-4 * max(abs(numeric), abs(analytic)), (
            f"component {k}: numeric {numeric:.6e} analytic {analytic:.6e}")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _result(success, zeta_norm=0.0, h_zeta_norm=0.0):
    from fdialab.attacks import AttackResult
    return AttackResult(success=success, iterations_used=1,
                        zeta=np.zeros(2), theta=np.zeros(5), z_f=np.zeros(5),
                        predicted_labels=np.zeros(5, dtype=np.int8),
                        bdd_statistic_final=0.0, zeta_norm=zeta_norm,
                        theta_norm=h_zeta_norm, h_zeta_norm=h_zeta_norm,
                        loss=0.0, variant="lesson1")


def test_metrics_all_failures():
    metrics = perturbation_metrics([_result(False), _result(False)])
    assert metrics.success_rate == 0.0
    assert metrics.rho_c is None and metrics.rho_a is None


def test_metrics_zero_perturbation_success():
    metrics = perturbation_metrics([_result(True)])
    assert metrics == perturbation_metrics([_result(True)])
    assert metrics.rho_c == 0.0


def test_metrics_mean():
    metrics = perturbation_metrics([_result(True, 0.1, 0.4),
                                    _result(True, 0.3, 0.6),
                                    _result(False, 9.9, 9.9)])
    assert metrics.success_rate == pytest.approx(2 / 3)
    assert metrics.rho_c == pytest.approx(0.2)
    assert metrics.rho_a == pytest.approx(0.5)


def test_config_validation():
    with pytest.raises(ContractError):
        AttackConfig(variant="lesson1", mu=0.0)
    with pytest.raises(ContractError):
        AttackConfig(variant="lesson1", max_iter=0)
    with pytest.raises(ContractError):
        AttackConfig(variant="nope")
    with pytest.raises(ContractError):
        AttackConfig(variant="lesson1", objective_mode="l2")
