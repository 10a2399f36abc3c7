import numpy as np
import pytest
import scipy.linalg

from fdialab import estimation, fdia
from fdialab.errors import ContractError
from fdialab.fdia import (Dataset, GenerationConfig, calibrate_noise,
                          calibration_pool, generate_dataset, labels_from_attack,
                          load_dataset, make_measurements, random_fdia,
                          sample_state, save_dataset)

from conftest import H_3BUS


# ---------------------------------------------------------------------------
# state sampling
# ---------------------------------------------------------------------------

def test_zero_base_loads_give_zero_state(grid3):
    grid3.base_loads = np.zeros(3)
    loads, x = sample_state(grid3, np.random.default_rng(0))
    np.testing.assert_array_equal(loads, 0.0)
    np.testing.assert_array_equal(x, 0.0)


def test_3bus_state_solves_dc_equations(grid3):
    rng = np.random.default_rng(1)
    loads, x = sample_state(grid3, rng)
    # direct 2x2 solve: B theta = -load on non-slack buses
    b_red = np.array([[20.0, -10.0], [-10.0, 10.0]])
    expected = scipy.linalg.solve(b_red, -loads[1:])
    np.testing.assert_allclose(x, expected, rtol=1e-12)
    # loads stay inside the 0.8..1.2 band around base
    assert 0.8 * 0.5 <= loads[1] <= 1.2 * 0.5
    assert 0.8 * 0.3 <= loads[2] <= 1.2 * 0.3


def test_slack_injection_balances_loads(grid3):
    rng = np.random.default_rng(2)
    loads, x = sample_state(grid3, rng)
    z = grid3.h_matrix @ x
    # meter 2 is the slack injection; it must carry the whole load
    assert z[2] == pytest.approx(loads[1] + loads[2], rel=1e-12)


def test_sample_state_deterministic(grid14):
    a = sample_state(grid14, np.random.default_rng(42))
    b = sample_state(grid14, np.random.default_rng(42))
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


# ---------------------------------------------------------------------------
# measurement synthesis and calibration
# ---------------------------------------------------------------------------

def test_zero_sigma_override_gives_exact_measurements(grid3):
    grid = grid3.with_noise_sigma(np.full(5, 1e-300))
    x = np.array([0.02, -0.01])
    z = make_measurements(grid, x, np.random.default_rng(0))
    np.testing.assert_allclose(z, H_3BUS @ x, atol=1e-290)


def test_measurements_reproducible(grid3_cal):
    x = np.array([0.02, -0.01])
    za = make_measurements(grid3_cal, x, np.random.default_rng(5))
    zb = make_measurements(grid3_cal, x, np.random.default_rng(5))
    np.testing.assert_array_equal(za, zb)


def test_noise_std_matches_sigma(grid3_cal):
    x = np.array([0.02, -0.01])
    rng = np.random.default_rng(6)
    draws = np.vstack([make_measurements(grid3_cal, x, rng)
                       for _ in range(100_000)])
    residuals = draws - H_3BUS @ x
    np.testing.assert_allclose(residuals.std(axis=0), grid3_cal.noise_sigma,
                               rtol=0.02)


def test_calibration_definition(grid3):
    samples = np.ones((150, 5))
    grid = calibrate_noise(grid3, samples)
    np.testing.assert_allclose(grid.noise_sigma, 0.02)


def test_calibration_floor(grid3):
    samples = np.zeros((150, 5))
    grid = calibrate_noise(grid3, samples)
    np.testing.assert_allclose(grid.noise_sigma, fdia.SIGMA_FLOOR)


def test_calibration_needs_100_samples(grid3):
    with pytest.raises(ContractError, match="100"):
        calibrate_noise(grid3, np.ones((99, 5)))


def test_calibration_deterministic(grid14):
    pool = calibration_pool(grid14, 120, np.random.default_rng(3))
    a = calibrate_noise(grid14, pool)
    b = calibrate_noise(grid14, pool)
    np.testing.assert_array_equal(a.noise_sigma, b.noise_sigma)
    # definition: 2% of the mean absolute reading, floored
    expected = np.maximum(0.02 * np.mean(np.abs(pool), axis=0), fdia.SIGMA_FLOOR)
    np.testing.assert_allclose(a.noise_sigma, expected, rtol=1e-12)


# ---------------------------------------------------------------------------
# attack vectors
# ---------------------------------------------------------------------------

def test_random_fdia_rejects_zero_variance(grid14):
    with pytest.raises(ContractError):
        random_fdia(grid14, 0.0, np.random.default_rng(0))


def test_random_fdia_structure(grid14_cal):
    rng = np.random.default_rng(7)
    for _ in range(50):
        spec = random_fdia(grid14_cal, 0.02, rng)
        assert 1 <= len(spec.target_indices) <= 6  # floor(13/2)
        assert set(spec.target_indices) == set(np.flatnonzero(spec.c))
        np.testing.assert_array_equal(spec.a, grid14_cal.h_matrix @ spec.c)


def test_target_count_uniform(grid14):
    rng = np.random.default_rng(8)
    counts = np.zeros(7)
    n = 100_000
    for _ in range(n):
        k = len(random_fdia(grid14, 0.02, rng).target_indices)
        counts[k] += 1
    expected = n / 6
    # 3-sigma multinomial band around the uniform frequency
    sigma = np.sqrt(n * (1 / 6) * (5 / 6))
    for k in range(1, 7):
        assert abs(counts[k] - expected) <= 3 * sigma, f"k={k}: {counts[k]}"


def test_generated_attacks_are_stealthy(grid14_cal):
    rng = np.random.default_rng(9)
    for _ in range(200):
        _, x = sample_state(grid14_cal, rng)
        z = make_measurements(grid14_cal, x, rng)
        spec = random_fdia(grid14_cal, 0.1, rng)
        s0 = estimation.bdd_statistic(grid14_cal, z)
        s1 = estimation.bdd_statistic(grid14_cal, z + spec.a)
        assert abs(s1 - s0) <= 1e-9 * (1 + s0)


def test_attack_scale_monotonicity(grid14_cal):
    rng = np.random.default_rng(10)
    means = []
    for nu2 in (0.02, 0.1, 0.5):
        norms = [np.linalg.norm(random_fdia(grid14_cal, nu2, rng).a)
                 for _ in range(1000)]
        means.append(np.mean(norms))
    assert means[0] < means[1] < means[2]


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------

def test_labels_zero_attack():
    np.testing.assert_array_equal(labels_from_attack(np.zeros(5)), np.zeros(5))


def test_labels_from_3bus_attack(grid3):
    # c = (0.01, 0): only the meters touching bus 2 light up
    a = grid3.h_matrix @ np.array([0.01, 0.0])
    np.testing.assert_array_equal(labels_from_attack(a), [1, 1, 1, 1, 1])
    # c = (0.01, 0.01): equal shifts leave branch 2-3 flow and the bus-3
    # injection untouched (structural zeros of H c)
    a = grid3.h_matrix @ np.array([0.01, 0.01])
    np.testing.assert_array_equal(labels_from_attack(a), [1, 0, 1, 1, 0])


def test_labels_infinite_epsilon():
    a = np.array([0.1, -0.1, 0.0])
    np.testing.assert_array_equal(labels_from_attack(a, np.inf), [0, 0, 0])


def test_label_support_consistency(grid14_cal):
    # structural zeros of H c are never labeled attacked
    rng = np.random.default_rng(11)
    col = {b: i for i, b in enumerate(grid14_cal.state_bus_ids)}
    for _ in range(100):
        spec = random_fdia(grid14_cal, 0.1, rng)
        y = labels_from_attack(spec.a)
        target_buses = {grid14_cal.state_bus_ids[i] for i in spec.target_indices}
        for j, meter in enumerate(grid14_cal.meters):
            if meter.kind == "branch_flow":
                touches = {meter.from_bus, meter.to_bus} & target_buses
                if not touches:
                    assert y[j] == 0
            else:
                neighbors = {meter.bus}
                for other in grid14_cal.meters:
                    if other.kind == "branch_flow":
                        if other.from_bus == meter.bus:
                            neighbors.add(other.to_bus)
                        elif other.to_bus == meter.bus:
                            neighbors.add(other.from_bus)
                if not (neighbors & target_buses):
                    assert y[j] == 0


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def test_generate_dataset_counts(grid3_cal):
    ds = generate_dataset(grid3_cal, GenerationConfig(
        n_normal=4, n_attacked_per_scale=1, seed=21))
    assert len(ds) == 7
    assert len(ds.attacks) == 3
    scales = sorted(spec.scale_variance for spec in ds.attacks.values())
    assert scales == [0.02, 0.1, 0.5]
    # label rows match the |a| > epsilon supports, recomputed directly
    for i in range(7):
        sample = ds.sample(i)
        if sample.fdia is None:
            np.testing.assert_array_equal(sample.y, 0)
        else:
            np.testing.assert_array_equal(
                sample.y, labels_from_attack(sample.fdia.a))


def test_generate_dataset_deterministic(grid3_cal):
    config = GenerationConfig(n_normal=10, n_attacked_per_scale=2, seed=5)
    a = generate_dataset(grid3_cal, config)
    b = generate_dataset(grid3_cal, config)
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_array_equal(a.y, b.y)
    assert list(a.attacks) == list(b.attacks)


def test_attacked_samples_keep_bdd_verdict(grid14_cal):
    ds = generate_dataset(grid14_cal, GenerationConfig(
        n_normal=50, n_attacked_per_scale=30, seed=6))
    for i, spec in ds.attacks.items():
        z_clean = ds.z[i] - spec.a
        clean = estimation.bdd_detect(grid14_cal, z_clean)
        attacked = estimation.bdd_detect(grid14_cal, ds.z[i])
        if not clean.flagged:
            assert not attacked.flagged


def test_dataset_meta_counts(grid3_cal):
    ds = generate_dataset(grid3_cal, GenerationConfig(
        n_normal=8, n_attacked_per_scale=3, seed=1))
    assert ds.meta["counts"]["normal"] == 8
    assert ds.meta["counts"]["attacked"] == 9
    assert len(ds) == ds.meta["n_samples"] == 17
    assert sum(1 for i in range(17) if ds.sample(i).fdia is not None) == 9


def test_split_indices_deterministic(grid3_cal):
    ds = generate_dataset(grid3_cal, GenerationConfig(
        n_normal=20, n_attacked_per_scale=4, seed=2))
    tr1, te1 = ds.split_indices()
    tr2, te2 = ds.split_indices()
    np.testing.assert_array_equal(tr1, tr2)
    np.testing.assert_array_equal(te1, te2)
    assert len(tr1) + len(te1) == len(ds)
    assert len(tr1) == round(len(ds) * 2 / 3)


# ---------------------------------------------------------------------------
# on-disk round trip
# ---------------------------------------------------------------------------

def test_dataset_roundtrip(grid14_cal, tmp_path):
    ds = generate_dataset(grid14_cal, GenerationConfig(
        n_normal=12, n_attacked_per_scale=4, seed=13))
    save_dataset(ds, tmp_path / "data")
    again = load_dataset(tmp_path / "data", grid14_cal)
    np.testing.assert_array_equal(again.z, ds.z)
    np.testing.assert_array_equal(again.y, ds.y)
    np.testing.assert_array_equal(again.x_true, ds.x_true)
    assert again.meta == ds.meta
    assert set(again.attacks) == set(ds.attacks)
    for i in ds.attacks:
        np.testing.assert_array_equal(again.attacks[i].c, ds.attacks[i].c)
        np.testing.assert_allclose(again.attacks[i].a, ds.attacks[i].a, atol=1e-15)
        assert again.attacks[i].scale_variance == ds.attacks[i].scale_variance
    expected_files = {"meta.json", "measurements.csv", "labels.csv",
                      "attacks.csv", "states.csv"}
    assert expected_files <= {p.name for p in (tmp_path / "data").iterdir()}
