import numpy as np
import pytest

from fdialab import fdia, gridcase
from fdialab.rng import derive_rng

MINIMAL_2BUS = """
function mpc = mini2
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0  0 0 0 1 1 0 0 1 1.06 0.94;
    2 1 50 0 0 0 1 1 0 0 1 1.06 0.94;
];
mpc.branch = [
    1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;
];
"""

# slack=1, line topology 1-2-3, x=0.1 each, loads 50 MW and 30 MW
LINE_3BUS = """
function mpc = line3
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1 3 0  0 0 0 1 1 0 0 1 1.06 0.94;
    2 1 50 0 0 0 1 1 0 0 1 1.06 0.94;
    3 1 30 0 0 0 1 1 0 0 1 1.06 0.94;
];
mpc.branch = [
    1 2 0.01 0.1 0 0 0 0 0 0 1 -360 360;
    2 3 0.01 0.1 0 0 0 0 0 0 1 -360 360;
];
"""

# hand-assembled measurement Jacobian of LINE_3BUS (states theta_2, theta_3):
# rows: flow 1-2, flow 2-3, injection 1, injection 2, injection 3
H_3BUS = np.array([
    [-10.0, 0.0],
    [10.0, -10.0],
    [-10.0, 0.0],
    [20.0, -10.0],
    [-10.0, 10.0],
])


@pytest.fixture
def raw3():
    return gridcase.parse_matpower_case(LINE_3BUS)


@pytest.fixture
def grid3(raw3):
    return gridcase.build_grid_model(raw3)


@pytest.fixture
def grid3_cal(grid3):
    return grid3.with_noise_sigma(np.full(grid3.n_meter, 0.02))


@pytest.fixture(scope="session")
def raw14():
    return gridcase.parse_matpower_case(gridcase.load_bundled_case("case14"))


@pytest.fixture(scope="session")
def grid14(raw14):
    return gridcase.build_grid_model(raw14)


@pytest.fixture(scope="session")
def grid14_cal(raw14):
    grid = gridcase.build_grid_model(raw14)
    pool = fdia.calibration_pool(grid, 200, derive_rng(7, "calibration"))
    return fdia.calibrate_noise(grid, pool)
