import math

import numpy as np
import pytest

from qvilab import core
from qvilab.core import (
    AssumptionConstants,
    Cone,
    ConfigError,
    Grid,
    GridFunction,
    ImpulseProblem,
    interp_slice,
    load_problem,
    sample,
)
from qvilab.expr import parse


BASIC_CONFIG = """
# 1-d transport problem with linear impulse cost
[problem]
n = 1
T = 1.0
H = "-p1"
h = "x1*exp(-x1)"
ell = "0.05 + 0.05*xi1"
cone = "orthant"

[constants]
L = 1.0
mu = 0.0
h0 = 3.0
ell0 = 0.05
alpha = 0.05
beta = 0.5
delta0 = 0.05
C = 16.0
gamma = 0.0
kappa = 0.25

[grid]
t_nodes = 11
x_nodes = 21
x_min = -1.0
x_max = 4.0
"""


def config_with(**replacements):
    text = BASIC_CONFIG
    for key, value in replacements.items():
        out = []
        for line in text.splitlines():
            if line.strip().startswith(key + " "):
                out.append(f"{key} = {value}")
            else:
                out.append(line)
        text = "\n".join(out)
    return text


class TestConstants:
    def test_valid(self):
        c = AssumptionConstants(1.0, 0.0, 3.0, 0.05, 0.05, 0.5, 0.05, 16.0, 0.0, 0.25)
        assert c.beta == 0.5

    def test_beta_out_of_range_names_key(self):
        with pytest.raises(ConfigError) as err:
            AssumptionConstants(1.0, 0.0, 3.0, 0.05, 0.05, 1.2, 0.05, 16.0, 0.0, 0.25)
        assert "beta" in str(err.value)

    def test_kappa_must_stay_below_beta(self):
        with pytest.raises(ConfigError) as err:
            AssumptionConstants(1.0, 0.0, 3.0, 0.05, 0.05, 0.5, 0.05, 16.0, 0.0, 0.7)
        assert "kappa" in str(err.value)

    def test_mu_zero_allowed(self):
        c = AssumptionConstants(1.0, 0.0, 3.0, 0.05, 0.05, 0.5, 0.05, 16.0, 0.0, 0.25)
        assert c.mu == 0.0


class TestCone:
    def test_orthant_membership(self):
        cone = Cone.orthant(2)
        assert cone.contains(np.array([1.0, 0.5]))
        assert cone.contains(np.array([0.0, 0.0]))
        assert not cone.contains(np.array([-0.5, 1.0]))

    def test_ray_cone_membership(self):
        cone = Cone.from_rays([[1.0, 1.0], [1.0, 0.0]])
        assert cone.contains(np.array([2.0, 1.0]))
        assert not cone.contains(np.array([0.0, 1.0]))

    def test_rays_are_normalized(self):
        cone = Cone.from_rays([[3.0, 4.0]])
        assert np.allclose(np.linalg.norm(cone.rays, axis=1), 1.0)

    def test_zero_ray_rejected(self):
        with pytest.raises(ConfigError):
            Cone.from_rays([[0.0, 0.0]])

    def test_coefficient_map(self):
        cone = Cone.orthant(2)
        xi = cone.from_coefficients(np.array([[1.0, 2.0], [0.0, 0.5]]))
        assert np.array_equal(xi, np.array([[1.0, 2.0], [0.0, 0.5]]))


class TestGrid:
    def test_spacing(self):
        grid = Grid(1.0, 11, (-1.0,), (4.0,), (21,))
        assert grid.dt == pytest.approx(0.1)
        assert grid.dx[0] == pytest.approx(0.25)
        assert grid.t[0] == 0.0 and grid.t[-1] == 1.0
        assert grid.axes[0][0] == -1.0 and grid.axes[0][-1] == 4.0

    def test_refine(self):
        grid = Grid(1.0, 11, (-1.0,), (4.0,), (21,))
        fine = grid.refine(2)
        assert fine.t_nodes == 21 and fine.x_nodes == (41,)
        assert fine.dx[0] == pytest.approx(grid.dx[0] / 2)

    def test_validation(self):
        with pytest.raises(ConfigError):
            Grid(1.0, 1, (-1.0,), (4.0,), (21,))
        with pytest.raises(ConfigError):
            Grid(1.0, 11, (4.0,), (-1.0,), (21,))
        with pytest.raises(ConfigError):
            Grid(-1.0, 11, (-1.0,), (4.0,), (21,))


class TestGridFunction:
    def grid(self):
        return Grid(1.0, 3, (0.0,), (1.0,), (3,))

    def test_shape_checked(self):
        with pytest.raises(ConfigError):
            GridFunction(self.grid(), np.zeros((3, 4)))

    def test_nonfinite_rejected(self):
        vals = np.zeros((3, 3))
        vals[1, 1] = np.nan
        with pytest.raises(ConfigError):
            GridFunction(self.grid(), vals)

    def test_write_once(self):
        gf = GridFunction(self.grid(), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            gf.values[0, 0] = 1.0

    def test_summary_first_row_major_tie(self):
        vals = np.zeros((3, 3))
        vals[0, 2] = -1.0
        vals[2, 0] = -1.0
        vals[1, 1] = 5.0
        gf = GridFunction(self.grid(), vals)
        s = gf.summary()
        assert s["min"] == -1.0 and s["max"] == 5.0
        assert s["argmin"] == [0.0, 1.0]  # (t=0, x=1) comes first row-major
        assert s["argmax"] == [0.5, 0.5]

    def test_csv_round_trip(self, tmp_path):
        grid = Grid(1.0, 2, (0.0,), (1.0,), (2,))
        gf = GridFunction(grid, np.array([[1.0, 2.0], [3.0, 4.0]]))
        path = tmp_path / "out.csv"
        gf.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t,x1,value"
        assert len(lines) == 5
        first = lines[1].split(",")
        assert float(first[0]) == 0.0 and float(first[1]) == 0.0 and float(first[2]) == 1.0
        # row-major: t varies slowest
        assert [float(l.split(",")[2]) for l in lines[1:]] == [1.0, 2.0, 3.0, 4.0]

    def test_csv_2d_header(self, tmp_path):
        grid = Grid(1.0, 2, (0.0, 0.0), (1.0, 1.0), (2, 2))
        gf = GridFunction(grid, np.arange(8.0).reshape(2, 2, 2))
        path = tmp_path / "out2.csv"
        gf.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "t,x1,x2,value"
        assert len(lines) == 9

    def test_read_csv_inverts_write(self, tmp_path):
        grid = Grid(1.0, 3, (-1.0, 0.0), (1.0, 2.0), (4, 3))
        rng = np.random.default_rng(3)
        gf = GridFunction(grid, rng.normal(size=grid.shape))
        path = tmp_path / "round.csv"
        gf.write_csv(path)
        back = core.read_csv(grid, path)
        assert np.array_equal(back.values, gf.values)

    def test_read_csv_rejects_foreign_grid(self, tmp_path):
        grid = Grid(1.0, 2, (0.0,), (1.0,), (2,))
        gf = GridFunction(grid, np.array([[1.0, 2.0], [3.0, 4.0]]))
        path = tmp_path / "round.csv"
        gf.write_csv(path)
        with pytest.raises(ConfigError, match="rows"):
            core.read_csv(Grid(1.0, 3, (0.0,), (1.0,), (2,)), path)
        with pytest.raises(ConfigError, match="header"):
            core.read_csv(Grid(1.0, 2, (0.0, 0.0), (1.0, 1.0), (2, 2)), path)


class TestSampling:
    def test_terminal_payoff_values(self):
        grid = Grid(1.0, 3, (-1.0,), (4.0,), (6,))
        gf = sample(parse("x1*exp(-x1)", ("x1",)), grid)
        # frozen oracle values: h(-1) = -e, h(0) = 0, h(1) = 1/e
        assert gf.values[0, 0] == pytest.approx(-math.e, abs=1e-15)
        assert gf.values[0, 1] == 0.0
        assert gf.values[2, 2] == pytest.approx(math.exp(-1.0), abs=1e-15)
        # time-independent expression: identical slices
        assert np.array_equal(gf.values[0], gf.values[1])

    def test_constant_expression_broadcasts(self):
        grid = Grid(1.0, 3, (-1.0,), (4.0,), (6,))
        gf = sample(parse("2.5", ()), grid)
        assert np.all(gf.values == 2.5)

    def test_fixed_env_substitution(self):
        grid = Grid(1.0, 2, (0.0,), (1.0,), (2,))
        gf = sample(parse("l0 + x1", ("l0", "x1")), grid, fixed_env={"l0": 0.05})
        assert gf.values[0, 1] == pytest.approx(1.05)

    def test_space_time_dependence(self):
        grid = Grid(1.0, 3, (0.0,), (1.0,), (3,))
        gf = sample(parse("t*10 + x1", ("t", "x1")), grid)
        assert gf.values[1, 2] == pytest.approx(5.0 + 1.0)
        assert gf.values[2, 0] == pytest.approx(10.0)


class TestInterpolation:
    def test_values_at_nodes_exact(self):
        grid = Grid(1.0, 2, (0.0,), (2.0,), (5,))
        vals = np.array([0.0, 1.0, 4.0, 9.0, 16.0])
        pts = grid.axes[0][:, None]
        assert np.array_equal(interp_slice(grid, vals, pts), vals)

    def test_linear_between_nodes(self):
        grid = Grid(1.0, 2, (0.0,), (2.0,), (5,))
        vals = np.array([0.0, 1.0, 4.0, 9.0, 16.0])
        got = interp_slice(grid, vals, np.array([[0.25]]))
        assert got[0] == pytest.approx(0.5)

    def test_clamped_outside_box(self):
        grid = Grid(1.0, 2, (0.0,), (2.0,), (5,))
        vals = np.array([0.0, 1.0, 4.0, 9.0, 16.0])
        got = interp_slice(grid, vals, np.array([[-3.0], [99.0]]))
        assert got[0] == 0.0 and got[1] == 16.0

    def test_bilinear(self):
        grid = Grid(1.0, 2, (0.0, 0.0), (1.0, 1.0), (2, 2))
        vals = np.array([[0.0, 1.0], [2.0, 3.0]])
        got = interp_slice(grid, vals, np.array([[0.5, 0.5]]))
        assert got[0] == pytest.approx(1.5)


class TestConfig:
    def test_load_basic(self):
        cfg = load_problem(BASIC_CONFIG)
        assert cfg.problem.n == 1
        assert cfg.grid.t_nodes == 11
        assert cfg.constants.ell0 == 0.05
        assert cfg.problem.g is None
        assert len(cfg.config_hash) == 64

    def test_missing_key_named(self):
        text = "\n".join(
            line for line in BASIC_CONFIG.splitlines() if not line.startswith("ell =")
        )
        with pytest.raises(ConfigError) as err:
            load_problem(text)
        assert "'ell'" in str(err.value)

    def test_constant_out_of_range_propagates(self):
        with pytest.raises(ConfigError) as err:
            load_problem(config_with(beta="1.2"))
        assert "beta" in str(err.value)

    def test_expression_error_reported(self):
        with pytest.raises(ConfigError) as err:
            load_problem(config_with(H='"-q1"'))
        assert "H" in str(err.value)

    def test_unquoted_expression_rejected(self):
        with pytest.raises(ConfigError):
            load_problem(config_with(H="-p1"))

    def test_nonpositive_cost_rejected(self):
        with pytest.raises(ConfigError) as err:
            load_problem(config_with(ell='"-1.0"'))
        assert "positive" in str(err.value)

    def test_overrides(self):
        cfg = load_problem(BASIC_CONFIG, overrides=("grid.t_nodes=5", "constants.ell0=0.1"))
        assert cfg.grid.t_nodes == 5
        assert cfg.constants.ell0 == 0.1

    def test_override_changes_hash(self):
        a = load_problem(BASIC_CONFIG)
        b = load_problem(BASIC_CONFIG, overrides=("grid.t_nodes=5",))
        assert a.config_hash != b.config_hash

    def test_bad_override_rejected(self):
        with pytest.raises(ConfigError):
            load_problem(BASIC_CONFIG, overrides=("nonsense",))
        with pytest.raises(ConfigError):
            load_problem(BASIC_CONFIG, overrides=("nosuch.key=1",))

    def test_optional_g(self):
        text = BASIC_CONFIG.replace('H = "-p1"', 'H = "-p1"\ng = "0.5"')
        cfg = load_problem(text)
        assert cfg.problem.g is not None
        # hamiltonian helper folds g in
        val = cfg.problem.hamiltonian(0.0, {"x1": 0.0}, {"p1": 2.0})
        assert val == pytest.approx(-1.5)

    def test_two_dimensional_config(self):
        text = """
[problem]
n = 2
T = 0.5
H = "-p1 - p2"
h = "x1 + x2"
ell = "0.1 + 0.1*(xi1 + xi2)"
cone = "1,0; 0,1"

[constants]
L = 1.0
mu = 0.0
h0 = 5.0
ell0 = 0.1
alpha = 0.1
beta = 0.5
delta0 = 0.1
C = 8.0
gamma = 0.0
kappa = 0.25

[grid]
t_nodes = 5
x_nodes = 7, 9
x_min = -1.0, -1.0
x_max = 1.0, 1.0
"""
        cfg = load_problem(text)
        assert cfg.problem.n == 2
        assert cfg.grid.x_nodes == (7, 9)
        assert cfg.problem.cone.kind == "rays"
        assert cfg.problem.cone.contains(np.array([0.3, 0.7]))

    def test_grid_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            load_problem(config_with(x_min="-1.0, -1.0"))

    def test_problem_rejects_wrong_vars(self):
        with pytest.raises(ConfigError) as err:
            ImpulseProblem(
                n=1,
                T=1.0,
                H=parse("-p1", ("p1",)),
                h=parse("t", ("t",)),  # h may not depend on t
                ell=parse("1", ()),
                cone=Cone.orthant(1),
            )
        assert "h" in str(err.value)

    def test_deterministic_loading(self):
        a = load_problem(BASIC_CONFIG)
        b = load_problem(BASIC_CONFIG)
        assert a.config_hash == b.config_hash
        assert a.grid == b.grid
