"""Problem containers, grids, config loading and sampling.

A problem instance couples a Hamiltonian H(t, x, p), a terminal payoff h(x),
an impulse cost ell(t, x, xi) with impulses constrained to a closed convex
cone, and an optional additive running term g(t, x) that is folded into H
wherever the library evaluates it.  Space is 1-d or 2-d, time runs on [0, T].

Config files are line oriented `key = value` with three sections:

    [problem]   n, T, H, h, ell, cone, g (optional)
    [constants] L, mu, h0, ell0, alpha, beta, delta0, C, gamma, kappa
    [grid]      t_nodes, x_nodes, x_min, x_max

Expression values and cone descriptions are double-quoted strings; numbers
are plain decimal literals, comma separated when per-dimension.  A cone is
either "orthant" or a semicolon separated ray list such as "1,0; 0,1".
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from . import expr as ex


class ConfigError(Exception):
    """Malformed config text, missing keys, or out-of-range constants."""


# ------------------------------------------------------------ constants ----

@dataclass(frozen=True)
class AssumptionConstants:
    """Constants used by the structural hypothesis audits.

    L, mu bound the Hamiltonian growth; h0 bounds the terminal payoff from
    below; ell0, alpha, beta give the impulse-cost coercivity floor
    ell0 + alpha*|xi|^beta; delta0 is the strict subadditivity margin; C,
    gamma, kappa are the growth/regularity constants for comparison checks.
    """

    L: float
    mu: float
    h0: float
    ell0: float
    alpha: float
    beta: float
    delta0: float
    C: float
    gamma: float
    kappa: float

    def __post_init__(self):
        checks = [
            ("L", self.L > 0.0, "need L > 0"),
            ("mu", 0.0 <= self.mu < 1.0, "need 0 <= mu < 1"),
            ("h0", self.h0 > 0.0, "need h0 > 0"),
            ("ell0", self.ell0 > 0.0, "need ell0 > 0"),
            ("alpha", self.alpha > 0.0, "need alpha > 0"),
            ("beta", 0.0 < self.beta < 1.0, "need 0 < beta < 1"),
            ("delta0", self.delta0 > 0.0, "need delta0 > 0"),
            ("C", self.C > 0.0, "need C > 0"),
            ("gamma", 0.0 <= self.gamma < 1.0, "need 0 <= gamma < 1"),
            ("kappa", 0.0 < self.kappa < self.beta, "need 0 < kappa < beta"),
        ]
        for name, ok, hint in checks:
            if not ok:
                raise ConfigError(
                    f"constant out of range: {name}={getattr(self, name)!r} ({hint})"
                )


# ----------------------------------------------------------------- cone ----

@dataclass(frozen=True)
class Cone:
    """Closed convex cone of admissible impulses.

    Represented by generating rays (unit normalized).  `kind` is "orthant"
    for the nonnegative orthant, where the rays are the coordinate basis,
    or "rays" for an explicit conic hull.
    """

    kind: str
    rays: np.ndarray  # (m, n), rows unit length

    @staticmethod
    def orthant(n):
        return Cone("orthant", np.eye(n))

    @staticmethod
    def from_rays(rays):
        rays = np.atleast_2d(np.asarray(rays, dtype=float))
        if rays.size == 0:
            raise ConfigError("cone needs at least one ray")
        norms = np.linalg.norm(rays, axis=1)
        if np.any(norms == 0.0):
            raise ConfigError("cone rays must be nonzero")
        return Cone("rays", rays / norms[:, None])

    @property
    def n(self):
        return self.rays.shape[1]

    @property
    def n_rays(self):
        return self.rays.shape[0]

    def from_coefficients(self, lam):
        """Map nonnegative ray coefficients (..., m) to impulses (..., n)."""
        lam = np.asarray(lam, dtype=float)
        return lam @ self.rays

    def contains(self, xi, tol=1e-9):
        xi = np.asarray(xi, dtype=float)
        scale = 1.0 + float(np.linalg.norm(xi))
        if self.kind == "orthant":
            return bool(np.all(xi >= -tol * scale))
        _, residual = nnls(self.rays.T, xi)
        return residual <= tol * scale

    def __post_init__(self):
        object.__setattr__(self, "rays", np.asarray(self.rays, dtype=float))
        self.rays.setflags(write=False)


# ----------------------------------------------------------------- grid ----

@dataclass(frozen=True)
class Grid:
    """Uniform tensor grid on [0, T] x [x_min, x_max]."""

    T: float
    t_nodes: int
    x_min: tuple
    x_max: tuple
    x_nodes: tuple

    def __post_init__(self):
        object.__setattr__(self, "x_min", tuple(float(v) for v in np.atleast_1d(self.x_min)))
        object.__setattr__(self, "x_max", tuple(float(v) for v in np.atleast_1d(self.x_max)))
        object.__setattr__(self, "x_nodes", tuple(int(v) for v in np.atleast_1d(self.x_nodes)))
        if self.T <= 0.0:
            raise ConfigError(f"grid needs T > 0, got {self.T}")
        if self.t_nodes < 2:
            raise ConfigError(f"grid needs t_nodes >= 2, got {self.t_nodes}")
        if not (len(self.x_min) == len(self.x_max) == len(self.x_nodes)):
            raise ConfigError("x_min, x_max, x_nodes must agree in dimension")
        for d, (lo, hi, cnt) in enumerate(zip(self.x_min, self.x_max, self.x_nodes)):
            if cnt < 2:
                raise ConfigError(f"grid needs x_nodes >= 2 in dimension {d + 1}")
            if not lo < hi:
                raise ConfigError(f"grid needs x_min < x_max in dimension {d + 1}")

    @property
    def n(self):
        return len(self.x_nodes)

    @property
    def dt(self):
        return self.T / (self.t_nodes - 1)

    @property
    def dx(self):
        return tuple(
            (hi - lo) / (cnt - 1)
            for lo, hi, cnt in zip(self.x_min, self.x_max, self.x_nodes)
        )

    @property
    def t(self):
        return np.linspace(0.0, self.T, self.t_nodes)

    @property
    def axes(self):
        return [
            np.linspace(lo, hi, cnt)
            for lo, hi, cnt in zip(self.x_min, self.x_max, self.x_nodes)
        ]

    @property
    def shape(self):
        return (self.t_nodes,) + tuple(self.x_nodes)

    @property
    def box_diagonal(self):
        return float(
            np.sqrt(sum((hi - lo) ** 2 for lo, hi in zip(self.x_min, self.x_max)))
        )

    def space_env(self):
        """Meshgrid environment {x1: ..., x2: ...} over the spatial box."""
        meshes = np.meshgrid(*self.axes, indexing="ij")
        return {f"x{d + 1}": m for d, m in enumerate(meshes)}

    def full_env(self):
        """Meshgrid environment {t, x1, ...} over the full space-time grid."""
        meshes = np.meshgrid(self.t, *self.axes, indexing="ij")
        env = {"t": meshes[0]}
        for d in range(self.n):
            env[f"x{d + 1}"] = meshes[d + 1]
        return env

    def refine(self, factor=2):
        """Grid with factor-times finer spacing in every direction."""
        return Grid(
            self.T,
            (self.t_nodes - 1) * factor + 1,
            self.x_min,
            self.x_max,
            tuple((c - 1) * factor + 1 for c in self.x_nodes),
        )


# -------------------------------------------------------- grid functions ----

@dataclass(frozen=True)
class GridFunction:
    """Finite values on every node of a Grid, write-once after creation."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ConfigError(
                f"grid function shape {vals.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ConfigError("grid function values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def summary(self):
        """Extrema and their first (row-major) locations."""
        flat_min = int(np.argmin(self.values))
        flat_max = int(np.argmax(self.values))
        return {
            "min": float(self.values.min()),
            "max": float(self.values.max()),
            "argmin": self._coords(flat_min),
            "argmax": self._coords(flat_max),
        }

    def _coords(self, flat_index):
        idx = np.unravel_index(flat_index, self.values.shape)
        coords = [float(self.grid.t[idx[0]])]
        for d, axis in enumerate(self.grid.axes):
            coords.append(float(axis[idx[d + 1]]))
        return coords

    def write_csv(self, path):
        write_csv(self, path)

    def shifted(self, c):
        return GridFunction(self.grid, self.values + c)


def write_csv(gf, path):
    """Row-major CSV export with header t,x1[,x2],value."""
    grid = gf.grid
    cols = ["t"] + [f"x{d + 1}" for d in range(grid.n)] + ["value"]
    env = grid.full_env()
    stacks = [env["t"]] + [env[f"x{d + 1}"] for d in range(grid.n)] + [gf.values]
    flat = [s.ravel() for s in stacks]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in zip(*flat):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_csv(grid, path):
    """Load a grid function exported by write_csv onto a matching grid."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    expected = ["t"] + [f"x{d + 1}" for d in range(grid.n)] + ["value"]
    if header != expected:
        raise ConfigError(
            f"unexpected CSV header {header!r}; this grid needs {expected!r}"
        )
    values = np.loadtxt(path, delimiter=",", skiprows=1, usecols=grid.n + 1,
                        ndmin=1)
    want = int(np.prod(grid.shape))
    if values.size != want:
        raise ConfigError(f"CSV holds {values.size} rows, grid needs {want}")
    return GridFunction(grid, values.reshape(grid.shape))


# ---------------------------------------------------------- interpolation ----

def interp_slice(grid, slice_values, points):
    """Multilinear interpolation of one time slice with clamped edges.

    `slice_values` has shape grid.x_nodes; `points` has shape (..., n).
    Points outside the box are clamped to the boundary coordinate-wise.
    """
    points = np.asarray(points, dtype=float)
    n = grid.n
    if points.shape[-1] != n:
        raise ValueError(f"points must have last dimension {n}")
    idx = []
    wts = []
    for d in range(n):
        lo = grid.x_min[d]
        dx = grid.dx[d]
        cnt = grid.x_nodes[d]
        f = (points[..., d] - lo) / dx
        f = np.clip(f, 0.0, cnt - 1.0)
        i = np.minimum(f.astype(np.int64), cnt - 2)
        idx.append(i)
        wts.append(f - i)
    if n == 1:
        i0, w0 = idx[0], wts[0]
        v0 = slice_values[i0]
        return v0 + w0 * (slice_values[i0 + 1] - v0)
    i0, w0 = idx[0], wts[0]
    i1, w1 = idx[1], wts[1]
    c00 = slice_values[i0, i1]
    c01 = slice_values[i0, i1 + 1]
    c10 = slice_values[i0 + 1, i1]
    c11 = slice_values[i0 + 1, i1 + 1]
    lo_edge = c00 + w1 * (c01 - c00)
    hi_edge = c10 + w1 * (c11 - c10)
    return lo_edge + w0 * (hi_edge - lo_edge)


# -------------------------------------------------------------- problems ----

_CONSTANT_KEYS = ("L", "mu", "h0", "ell0", "alpha", "beta", "delta0", "C", "gamma", "kappa")


@dataclass(frozen=True)
class ImpulseProblem:
    """Hamiltonian, terminal payoff, impulse cost, and impulse cone.

    `g` is an optional additive running term in (t, x); every Hamiltonian
    evaluation in the library uses H(t, x, p) + g(t, x).
    """

    n: int
    T: float
    H: object
    h: object
    ell: object
    cone: Cone
    g: object = None

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ConfigError(f"space dimension must be 1 or 2, got {self.n}")
        if self.T <= 0.0:
            raise ConfigError(f"need T > 0, got {self.T}")
        if self.cone.n != self.n:
            raise ConfigError(
                f"cone dimension {self.cone.n} does not match problem dimension {self.n}"
            )
        x_names = {f"x{d + 1}" for d in range(self.n)}
        p_names = {f"p{d + 1}" for d in range(self.n)}
        xi_names = {f"xi{d + 1}" for d in range(self.n)}
        self._check_vars("H", self.H, {"t"} | x_names | p_names)
        self._check_vars("h", self.h, x_names)
        self._check_vars("ell", self.ell, {"t"} | x_names | xi_names)
        if self.g is not None:
            self._check_vars("g", self.g, {"t"} | x_names)

    @staticmethod
    def _check_vars(label, node, allowed):
        used = ex.variables(node)
        extra = used - allowed
        if extra:
            raise ConfigError(
                f"expression for {label} uses disallowed variable(s): {sorted(extra)}"
            )

    # -- evaluation helpers; every caller goes through these so the optional
    # -- g term is never forgotten.

    def hamiltonian(self, t, x_env, p_env):
        env = {"t": t}
        env.update(x_env)
        env.update(p_env)
        out = ex.evaluate(self.H, env)
        if self.g is not None:
            out = out + ex.evaluate(self.g, {"t": t, **x_env})
        return out

    def terminal(self, x_env):
        return ex.evaluate(self.h, dict(x_env))

    def cost(self, t, x_env, xi_env):
        env = {"t": t}
        env.update(x_env)
        env.update(xi_env)
        return ex.evaluate(self.ell, env)

    def x_env(self, x_arrays):
        return {f"x{d + 1}": x_arrays[d] for d in range(self.n)}

    def xi_env(self, xi_arrays):
        return {f"xi{d + 1}": xi_arrays[d] for d in range(self.n)}


def sample(e, grid, fixed_env=None):
    """Evaluate an expression on every (t, x) node of the grid."""
    env = grid.full_env()
    if fixed_env:
        env.update(fixed_env)
    out = ex.evaluate(e, env)
    out = np.broadcast_to(np.asarray(out, dtype=float), grid.shape)
    return GridFunction(grid, out)


# ---------------------------------------------------------- config parsing ----

def parse_config_dict(text):
    """Parse config text into {section: {key: raw value string}}."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in ("problem", "constants", "grid"):
                raise ConfigError(f"unknown section [{current}] on line {lineno}")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value' on line {lineno}: {raw.strip()!r}")
        if current is None:
            raise ConfigError(f"key outside any section on line {lineno}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"empty key on line {lineno}")
        sections[current][key] = value
    return sections


def _unquote(value, key):
    if len(value) >= 2 and value[0] == '"' and value[-1] == '"':
        return value[1:-1]
    raise ConfigError(f"value for '{key}' must be a double-quoted string, got {value!r}")


def _floats(value, key):
    try:
        return tuple(float(part.strip()) for part in value.split(","))
    except ValueError:
        raise ConfigError(f"value for '{key}' must be numeric, got {value!r}") from None


def _float(value, key):
    parts = _floats(value, key)
    if len(parts) != 1:
        raise ConfigError(f"value for '{key}' must be a single number, got {value!r}")
    return parts[0]


def _int(value, key):
    f = _float(value, key)
    if f != int(f):
        raise ConfigError(f"value for '{key}' must be an integer, got {value!r}")
    return int(f)


def _require(section, key, table):
    if key not in table:
        raise ConfigError(f"missing required key '{key}' in section [{section}]")
    return table[key]


def _parse_cone(value, n):
    text = _unquote(value, "cone").strip()
    if text == "orthant":
        return Cone.orthant(n)
    rays = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        comps = tuple(float(c.strip()) for c in part.split(","))
        if len(comps) != n:
            raise ConfigError(
                f"cone ray {part!r} has {len(comps)} component(s), problem has n={n}"
            )
        rays.append(comps)
    if not rays:
        raise ConfigError("cone description is empty")
    return Cone.from_rays(rays)


@dataclass(frozen=True)
class ProblemConfig:
    """Everything a config file defines, plus its canonical hash."""

    problem: ImpulseProblem
    constants: AssumptionConstants
    grid: Grid
    config_hash: str
    text: str


def apply_overrides(sections, overrides):
    """Apply 'section.key=value' override strings to a parsed config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, value = item.split("=", 1)
        if "." not in target:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        section, key = target.split(".", 1)
        section = section.strip()
        key = key.strip()
        if section not in ("problem", "constants", "grid"):
            raise ConfigError(f"unknown override section {section!r}")
        sections.setdefault(section, {})[key] = value.strip()
    return sections


def load_problem(text, overrides=()):
    """Build problem, constants, and grid from config text.

    Optional overrides are 'section.key=value' strings applied on top of the
    parsed file before validation.
    """
    sections = parse_config_dict(text)
    if overrides:
        sections = apply_overrides(sections, overrides)
    for name in ("problem", "constants", "grid"):
        if name not in sections:
            raise ConfigError(f"missing section [{name}]")
    prob = sections["problem"]
    cons = sections["constants"]
    grd = sections["grid"]

    n = _int(_require("problem", "n", prob), "n")
    if n not in (1, 2):
        raise ConfigError(f"space dimension must be 1 or 2, got {n}")
    T = _float(_require("problem", "T", prob), "T")
    x_names = tuple(f"x{d + 1}" for d in range(n))
    p_names = tuple(f"p{d + 1}" for d in range(n))
    xi_names = tuple(f"xi{d + 1}" for d in range(n))

    def parse_expr(key, allowed, table=prob, optional=False):
        if optional and key not in table:
            return None
        src = _unquote(_require("problem", key, table), key)
        try:
            return ex.parse(src, allowed)
        except ex.ExprError as err:
            raise ConfigError(f"bad expression for '{key}': {err}") from err

    H = parse_expr("H", ("t",) + x_names + p_names)
    h = parse_expr("h", x_names)
    ell = parse_expr("ell", ("t",) + x_names + xi_names)
    g = parse_expr("g", ("t",) + x_names, optional=True)
    cone = _parse_cone(_require("problem", "cone", prob), n)

    constants = AssumptionConstants(
        **{key: _float(_require("constants", key, cons), key) for key in _CONSTANT_KEYS}
    )

    t_nodes = _int(_require("grid", "t_nodes", grd), "t_nodes")
    x_nodes = tuple(int(v) for v in _floats(_require("grid", "x_nodes", grd), "x_nodes"))
    x_min = _floats(_require("grid", "x_min", grd), "x_min")
    x_max = _floats(_require("grid", "x_max", grd), "x_max")
    if not (len(x_nodes) == len(x_min) == len(x_max) == n):
        raise ConfigError(
            f"grid keys must each have {n} value(s): "
            f"x_nodes={x_nodes}, x_min={x_min}, x_max={x_max}"
        )
    grid = Grid(T, t_nodes, x_min, x_max, x_nodes)

    problem = ImpulseProblem(n=n, T=T, H=H, h=h, ell=ell, cone=cone, g=g)
    _check_cost_positive(problem, grid)

    digest = hashlib.sha256()
    digest.update(text.encode())
    for item in overrides:
        digest.update(b"\x00" + item.encode())
    return ProblemConfig(problem, constants, grid, digest.hexdigest(), text)


def _check_cost_positive(problem, grid):
    """Reject costs that are not strictly positive on a coarse sample."""
    rng = np.random.default_rng(0)
    t = rng.uniform(0.0, problem.T, 64)
    x = [rng.uniform(lo, hi, 64) for lo, hi in zip(grid.x_min, grid.x_max)]
    lam = rng.uniform(0.0, grid.box_diagonal, (64, problem.cone.n_rays))
    xi = problem.cone.from_coefficients(lam)
    env = {"t": t}
    env.update({f"x{d + 1}": x[d] for d in range(problem.n)})
    env.update({f"xi{d + 1}": xi[..., d] for d in range(problem.n)})
    vals = np.asarray(ex.evaluate(problem.ell, env), dtype=float)
    if np.any(vals <= 0.0):
        bad = np.argwhere(np.atleast_1d(vals) <= 0.0)[0]
        raise ConfigError(
            "impulse cost must be strictly positive; found nonpositive sample "
            f"value {np.atleast_1d(vals)[tuple(bad)]!r}"
        )
