"""Black-box test functions, exposed in maximize sense.

Each classic function is written in its usual minimization form
(``raw``); ``BlackboxFunction.__call__`` returns the negated value so
every target is maximized.  Hartmann functions follow the positive-sum
form ``sum_i alpha_i exp(-...)``, which is already a maximization target;
their ``raw`` form is the usual negated sum.

All evaluation functions are vectorized over rows of a ``(n, d)`` array.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import EvaluationError

F_RANGE_PROBE = 100_000
F_RANGE_SEED = 20240611


class OutOfBoundsWarning(UserWarning):
    """A query point was clamped into the function's box."""


# ---------------------------------------------------------------------------
# raw (minimization-form) definitions
# ---------------------------------------------------------------------------


def multi_optima(x):
    # 1-D multimodal stand-in; maximize form, raw is its negation
    t = x[:, 0]
    return -(np.sin(3 * t) * np.exp(-0.1 * t * t) + 0.5 * np.sin(7 * t))


def ackley(x, a=20.0, b=0.2, c=2 * np.pi):
    d = x.shape[1]
    s1 = np.sum(x * x, axis=1) / d
    s2 = np.sum(np.cos(c * x), axis=1) / d
    # grouped so the value at the origin is exactly 0
    return (a - a * np.exp(-b * np.sqrt(s1))) + (np.e - np.exp(s2))


def beale(x):
    x1, x2 = x[:, 0], x[:, 1]
    return ((1.5 - x1 + x1 * x2) ** 2 + (2.25 - x1 + x1 * x2**2) ** 2
            + (2.625 - x1 + x1 * x2**3) ** 2)


def booth(x):
    x1, x2 = x[:, 0], x[:, 1]
    return (x1 + 2 * x2 - 7) ** 2 + (2 * x1 + x2 - 5) ** 2


def branin(x):
    x1, x2 = x[:, 0], x[:, 1]
    b = 5.1 / (4 * np.pi**2)
    c = 5 / np.pi
    t = 1 / (8 * np.pi)
    return (x2 - b * x1**2 + c * x1 - 6) ** 2 + 10 * (1 - t) * np.cos(x1) + 10


def bukin6(x):
    x1, x2 = x[:, 0], x[:, 1]
    return 100 * np.sqrt(np.abs(x2 - 0.01 * x1**2)) + 0.01 * np.abs(x1 + 10)


def six_hump_camel(x):
    x1, x2 = x[:, 0], x[:, 1]
    return (4 - 2.1 * x1**2 + x1**4 / 3) * x1**2 + x1 * x2 + (-4 + 4 * x2**2) * x2**2


def drop_wave(x):
    r2 = np.sum(x * x, axis=1)
    return -(1 + np.cos(12 * np.sqrt(r2))) / (0.5 * r2 + 2)


def griewank(x):
    i = np.arange(1, x.shape[1] + 1)
    return np.sum(x * x, axis=1) / 4000 - np.prod(np.cos(x / np.sqrt(i)), axis=1) + 1


def holder_table(x):
    x1, x2 = x[:, 0], x[:, 1]
    r = np.sqrt(x1**2 + x2**2)
    return -np.abs(np.sin(x1) * np.cos(x2) * np.exp(np.abs(1 - r / np.pi)))


def levi13(x):
    x1, x2 = x[:, 0], x[:, 1]
    return (np.sin(3 * np.pi * x1) ** 2 + (x1 - 1) ** 2 * (1 + np.sin(3 * np.pi * x2) ** 2)
            + (x2 - 1) ** 2 * (1 + np.sin(2 * np.pi * x2) ** 2))


def levy(x):
    w = 1 + (x - 1) / 4
    head = np.sin(np.pi * w[:, 0]) ** 2
    mid = np.sum((w[:, :-1] - 1) ** 2 * (1 + 10 * np.sin(np.pi * w[:, :-1] + 1) ** 2), axis=1)
    tail = (w[:, -1] - 1) ** 2 * (1 + np.sin(2 * np.pi * w[:, -1]) ** 2)
    return head + mid + tail


HARTMANN_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN3_A = np.array([
    [3.0, 10, 30],
    [0.1, 10, 35],
    [3.0, 10, 30],
    [0.1, 10, 35],
])
HARTMANN3_P = 1e-4 * np.array([
    [3689, 1170, 2673],
    [4699, 4387, 7470],
    [1091, 8732, 5547],
    [381, 5743, 8828],
])
HARTMANN6_A = np.array([
    [10, 3, 17, 3.50, 1.7, 8],
    [0.05, 10, 17, 0.1, 8, 14],
    [3.0, 3.5, 1.7, 10, 17, 8],
    [17, 8, 0.05, 10, 0.1, 14],
])
HARTMANN6_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])


def _hartmann(x, a_mat, p_mat):
    inner = np.sum(a_mat[None, :, :] * (x[:, None, :] - p_mat[None, :, :]) ** 2, axis=2)
    return -np.sum(HARTMANN_ALPHA[None, :] * np.exp(-inner), axis=1)


def hartmann3(x):
    return _hartmann(x, HARTMANN3_A, HARTMANN3_P)


def hartmann6(x):
    return _hartmann(x, HARTMANN6_A, HARTMANN6_P)


# ---------------------------------------------------------------------------
# function objects
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlackboxFunction:
    """A box-bounded target to maximize.

    ``known_best`` is ``(x_star, f_star)`` in maximize sense, or ``None``.
    """

    name: str
    dim: int
    bounds: np.ndarray
    raw: object = field(repr=False)
    known_best: tuple | None = None
    note: str = ""

    @property
    def key(self) -> str:
        return f"{self.name}{self.dim}d"

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        vals = -self.raw(np.atleast_2d(x))
        return float(vals[0]) if single else vals

    def describe(self) -> dict:
        out = {
            "name": self.name,
            "dim": self.dim,
            "bounds": self.bounds.tolist(),
            "known_best": None,
            "sense": "maximize",
        }
        if self.known_best is not None:
            out["known_best"] = {"x": list(map(float, self.known_best[0])), "f": float(self.known_best[1])}
        if self.note:
            out["note"] = self.note
        return out


def _box(lo, hi, dim):
    return np.tile(np.array([[lo, hi]], dtype=np.float64), (dim, 1))


def _make(name, dim, bounds, raw, x_star=None, note=""):
    bounds = np.asarray(bounds, dtype=np.float64)
    best = None
    if x_star is not None:
        x_star = np.asarray(x_star, dtype=np.float64)
        best = (x_star, float(-raw(x_star[None, :])[0]))
    return BlackboxFunction(name, dim, bounds, raw, best, note)


# optimizer locations refined numerically (Nelder-Mead from the literature values)
_MULTI_OPTIMA_XSTAR = [-1.563034474466292]
_CAMEL_XSTAR = [0.08984201310031806, -0.7126564030207396]
_HOLDER_XSTAR = [8.055023472141116, 9.664590028909654]
_HARTMANN3_XSTAR = [0.11458887845294831, 0.5556488922867451, 0.8525469850409244]
_HARTMANN6_XSTAR = [0.20168951107193658, 0.1500106877565915, 0.47687397258643693,
                    0.2753324311417338, 0.3116516160678926, 0.6573005327816093]


def get_function(name: str, dim: int | None = None) -> BlackboxFunction:
    """Look up one benchmark by name (case-insensitive) and dimension."""
    key = name.lower().replace("_", "").replace("-", "").replace(" ", "").replace(".", "")
    aliases = {
        "multioptima": "multi_optima", "multi": "multi_optima",
        "ackley": "ackley", "beale": "beale", "booth": "booth", "branin": "branin",
        "bukin": "bukin", "bukin6": "bukin", "camel": "camel", "sixhumpcamel": "camel",
        "dropwave": "dropwave", "griewank": "griewank", "holder": "holder", "holdertable": "holder",
        "levin13": "levi13", "levi13": "levi13", "levy": "levy",
        "hartmann": "hartmann", "hartmann3": "hartmann", "hartmann6": "hartmann",
    }
    if key not in aliases:
        raise KeyError(f"unknown benchmark function {name!r}")
    canon = aliases[key]
    if canon == "hartmann" and dim is None:
        dim = 6 if key.endswith("6") else 3
    return _build(canon, dim)


@lru_cache(maxsize=None)
def _build(canon, dim):
    if canon == "multi_optima":
        return _make("multi_optima", 1, [[-3.0, 3.0]], multi_optima, _MULTI_OPTIMA_XSTAR,
                     note="stand-in: sin(3x)exp(-0.1x^2) + 0.5 sin(7x) on [-3, 3]")
    if canon == "ackley":
        d = dim or 2
        return _make("ackley", d, _box(-32.768, 32.768, d), ackley, np.zeros(d))
    if canon == "griewank":
        d = dim or 2
        return _make("griewank", d, _box(-600.0, 600.0, d), griewank, np.zeros(d))
    if canon == "levy":
        d = dim or 2
        return _make("levy", d, _box(-10.0, 10.0, d), levy, np.ones(d))
    if canon == "hartmann":
        if dim == 3:
            return _make("hartmann", 3, _box(0.0, 1.0, 3), hartmann3, _HARTMANN3_XSTAR)
        if dim == 6:
            return _make("hartmann", 6, _box(0.0, 1.0, 6), hartmann6, _HARTMANN6_XSTAR)
        raise KeyError("hartmann is defined for dim 3 and 6")
    if dim not in (None, 2):
        raise KeyError(f"{canon} is a 2-D function")
    table = {
        "beale": (_box(-4.5, 4.5, 2), beale, [3.0, 0.5]),
        "booth": (_box(-10.0, 10.0, 2), booth, [1.0, 3.0]),
        "branin": ([[-5.0, 10.0], [0.0, 15.0]], branin, [np.pi, 2.275]),
        "bukin": ([[-15.0, -5.0], [-3.0, 3.0]], bukin6, [-10.0, 1.0]),
        "camel": ([[-3.0, 3.0], [-2.0, 2.0]], six_hump_camel, _CAMEL_XSTAR),
        "dropwave": (_box(-5.12, 5.12, 2), drop_wave, [0.0, 0.0]),
        "holder": (_box(-10.0, 10.0, 2), holder_table, _HOLDER_XSTAR),
        "levi13": (_box(-10.0, 10.0, 2), levi13, [1.0, 1.0]),
    }
    bounds, raw, xs = table[canon]
    return _make(canon, 2, bounds, raw, xs)


# (function, dim) rows of the sequential-optimization table, with (init, steps)
TABLE3 = [
    ("multi_optima", 1, 5, 25),
    ("ackley", 2, 5, 25),
    ("beale", 2, 5, 25),
    ("booth", 2, 5, 25),
    ("branin", 2, 5, 25),
    ("bukin", 2, 5, 25),
    ("camel", 2, 5, 25),
    ("dropwave", 2, 5, 25),
    ("griewank", 2, 5, 25),
    ("holder", 2, 5, 25),
    ("levi13", 2, 5, 25),
    ("levy", 2, 5, 25),
    ("hartmann", 3, 5, 25),
    ("ackley", 4, 10, 25),
    ("griewank", 4, 10, 25),
    ("levy", 4, 10, 25),
    ("hartmann", 6, 10, 25),
    ("ackley", 8, 10, 50),
    ("griewank", 8, 10, 50),
    ("levy", 8, 10, 50),
]


def suite() -> list[BlackboxFunction]:
    """Every (function, dim) pair of the sequential-optimization table."""
    return [get_function(name, dim) for name, dim, _, _ in TABLE3]


def evaluate(f: BlackboxFunction, x) -> float:
    """Evaluate one point (maximize sense), clamping into the box with a warning."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != f.dim:
        raise ValueError(f"{f.key}: expected {f.dim} coordinates, got {x.size}")
    lo, hi = f.bounds[:, 0], f.bounds[:, 1]
    clamped = np.clip(x, lo, hi)
    if np.any(clamped != x):
        warnings.warn(f"{f.key}: point {x.tolist()} clamped into bounds", OutOfBoundsWarning, stacklevel=2)
    value = f(clamped)
    if not np.isfinite(value):
        raise EvaluationError(f"{f.key}: non-finite value at {clamped.tolist()}", x=clamped)
    return value


def uniform_probe(f: BlackboxFunction, n: int, seed: int):
    rng = np.random.default_rng(seed)
    lo, hi = f.bounds[:, 0], f.bounds[:, 1]
    return lo + (hi - lo) * rng.random((n, f.dim))


@lru_cache(maxsize=None)
def f_range(name: str, dim: int) -> tuple[float, float]:
    """AUC normalization ``(worst, best)``: min over a fixed uniform probe, and the known optimum."""
    f = get_function(name, dim)
    vals = f(uniform_probe(f, F_RANGE_PROBE, F_RANGE_SEED))
    return float(vals.min()), float(f.known_best[1])
