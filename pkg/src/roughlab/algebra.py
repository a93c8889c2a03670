"""Level-2 rough path algebra on discrete time grids.

An increment over an interval carries a first-order part x in R^d and a
second-order part xx in R^{d x d} (the prescribed iterated integral).
Increments over adjacent intervals compose by the Chen group law

    (x, xx) * (y, yy) = (x + y, xx + yy + x (x) y),

which is associative with identity (0, 0).  A sampled path on a grid is
stored as one increment per step; increments over longer spans are obtained
by composition, so grid data is Chen-consistent by construction and the
`validate_chen` check only guards against numerical degradation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

__all__ = [
    "Level2Increment",
    "HoelderControl",
    "PVarTableControl",
    "RoughPathGrid",
    "chen_mul",
    "inverse",
    "geometric_defect",
    "lift_piecewise_linear",
    "line_path",
    "hoelder_exponent_fit",
    "write_grid_csv",
    "read_grid_csv",
]


@dataclass(frozen=True)
class Level2Increment:
    """Group element (x, xx) in R^d + R^{d x d}.

    `first` holds the path increment, `second` the second-order iterated
    integral over the same interval.  Instances are immutable; all algebra
    returns new objects.
    """

    first: np.ndarray
    second: np.ndarray

    def __post_init__(self):
        first = np.atleast_1d(np.asarray(self.first, dtype=float))
        second = np.asarray(self.second, dtype=float)
        if first.ndim != 1:
            raise ValueError("first level must be a vector")
        d = first.shape[0]
        if second.shape != (d, d):
            raise ValueError(
                f"second level shape {second.shape} does not match dim {d}"
            )
        if not (np.all(np.isfinite(first)) and np.all(np.isfinite(second))):
            raise ValueError("increment entries must be finite")
        first.setflags(write=False)
        second.setflags(write=False)
        object.__setattr__(self, "first", first)
        object.__setattr__(self, "second", second)

    @property
    def dim(self) -> int:
        return self.first.shape[0]

    @staticmethod
    def identity(dim: int) -> "Level2Increment":
        return Level2Increment(np.zeros(dim), np.zeros((dim, dim)))


def chen_mul(a: Level2Increment, b: Level2Increment) -> Level2Increment:
    """Compose two adjacent increments by the Chen group law."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return Level2Increment(
        a.first + b.first,
        a.second + b.second + np.outer(a.first, b.first),
    )


def inverse(a: Level2Increment) -> Level2Increment:
    """Group inverse: (-x, -xx + x (x) x)."""
    return Level2Increment(-a.first, -a.second + np.outer(a.first, a.first))


def geometric_defect(a: Level2Increment) -> float:
    """Frobenius norm of Sym(xx) - x (x) x / 2.

    Zero for geometric (Stratonovich-consistent) increments; an Ito-type
    second level produces a positive defect.
    """
    sym = 0.5 * (a.second + a.second.T)
    return float(np.linalg.norm(sym - 0.5 * np.outer(a.first, a.first)))


@dataclass(frozen=True)
class HoelderControl:
    """Control omega(s, t) = scale * (t - s), with variation exponent p."""

    scale: float = 1.0
    p: float = 2.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.p < 2:
            raise ValueError("exponent p must be >= 2")

    def omega(self, s, t):
        return self.scale * (np.asarray(t, dtype=float) - s)


@dataclass(frozen=True)
class PVarTableControl:
    """Grid-indexed superadditive control for variation-type experiments.

    `table[i, j]` stores omega(t_i, t_j) for grid nodes; queries snap to the
    nearest enclosing node pair.  Superadditivity on grid triples is the
    caller's responsibility and can be checked with `validate_superadditive`.
    """

    times: np.ndarray
    table: np.ndarray
    p: float = 2.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        table = np.asarray(self.table, dtype=float)
        n = times.shape[0]
        if table.shape != (n, n):
            raise ValueError("table must be square over the grid nodes")
        if self.p < 2:
            raise ValueError("exponent p must be >= 2")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "table", table)

    def omega(self, s, t):
        i = int(np.searchsorted(self.times, s))
        j = np.searchsorted(self.times, np.atleast_1d(np.asarray(t, dtype=float)))
        out = self.table[i, j]
        return out if out.shape != (1,) else float(out[0])

    def validate_superadditive(self, atol: float = 1e-12) -> bool:
        """Check omega(s,u) + omega(u,t) <= omega(s,t) on all grid triples."""
        n = self.times.shape[0]
        tab = self.table
        if np.any(np.diag(tab) != 0.0) or np.any(tab < -atol):
            return False
        for i in range(n):
            for k in range(i, n):
                span = tab[i, k]
                for j in range(i, k + 1):
                    if tab[i, j] + tab[j, k] > span + atol:
                        return False
        return True


@dataclass(frozen=True)
class RoughPathGrid:
    """A sampled level-2 rough path: time grid plus one increment per step.

    `firsts[i]` / `seconds[i]` hold the increment over [times[i], times[i+1]].
    `start` anchors the first-level node values (needed by integrands that
    evaluate along the path).  Spans between non-adjacent nodes come from
    `increment`, computed in O(1) from cached prefix compositions.
    """

    times: np.ndarray
    firsts: np.ndarray
    seconds: np.ndarray
    control: HoelderControl | PVarTableControl = field(default_factory=HoelderControl)
    start: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        firsts = np.asarray(self.firsts, dtype=float)
        seconds = np.asarray(self.seconds, dtype=float)
        if times.ndim != 1 or times.shape[0] < 2:
            raise ValueError("need at least two grid nodes")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        n = times.shape[0] - 1
        if firsts.ndim != 2 or firsts.shape[0] != n:
            raise ValueError("firsts must have one row per step")
        d = firsts.shape[1]
        if seconds.shape != (n, d, d):
            raise ValueError("seconds must be (n_steps, d, d)")
        start = np.zeros(d) if self.start is None else np.asarray(self.start, dtype=float)
        if start.shape != (d,):
            raise ValueError("start must match the path dimension")
        for arr in (times, firsts, seconds, start):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "firsts", firsts)
        object.__setattr__(self, "seconds", seconds)
        object.__setattr__(self, "start", start)

    @classmethod
    def from_steps(cls, times, steps, control=None, start=None) -> "RoughPathGrid":
        firsts = np.stack([s.first for s in steps])
        seconds = np.stack([s.second for s in steps])
        control = control if control is not None else HoelderControl()
        return cls(times, firsts, seconds, control, start)

    @property
    def dim(self) -> int:
        return self.firsts.shape[1]

    @property
    def n_steps(self) -> int:
        return self.firsts.shape[0]

    @property
    def horizon(self) -> float:
        return float(self.times[-1] - self.times[0])

    def step(self, i: int) -> Level2Increment:
        return Level2Increment(self.firsts[i], self.seconds[i])

    @cached_property
    def _prefix_first(self) -> np.ndarray:
        # cumulative first level from node 0: shape (n_steps + 1, d)
        out = np.zeros((self.n_steps + 1, self.dim))
        np.cumsum(self.firsts, axis=0, out=out[1:])
        return out

    @cached_property
    def _prefix_second(self) -> np.ndarray:
        # Chen prefix: xx_{0,k+1} = xx_{0,k} + xx_k + S_k (x) dx_k
        n, d = self.n_steps, self.dim
        out = np.zeros((n + 1, d, d))
        s = self._prefix_first
        cross = np.einsum("ki,kj->kij", s[:-1], self.firsts)
        np.cumsum(self.seconds + cross, axis=0, out=out[1:])
        return out

    @cached_property
    def values(self) -> np.ndarray:
        """First-level node values start + X_{t_0, t_i}, shape (N+1, d)."""
        return self.start + self._prefix_first

    def increment(self, i: int, j: int) -> Level2Increment:
        """Chen composition of steps i..j-1; identity when i == j."""
        n = self.n_steps
        if not (0 <= i <= j <= n):
            raise IndexError(f"need 0 <= i <= j <= {n}, got ({i}, {j})")
        a = self._prefix_first[i]
        first = self._prefix_first[j] - a
        second = (
            self._prefix_second[j]
            - self._prefix_second[i]
            - np.outer(a, first)
        )
        return Level2Increment(first, second)

    def validate_chen(self, rtol: float = 1e-10, max_triples: int = 200,
                      rng: np.random.Generator | None = None) -> bool:
        """Check increment(i,k) == increment(i,j) * increment(j,k) on sampled triples."""
        rng = rng if rng is not None else np.random.default_rng(0)
        n = self.n_steps
        for _ in range(max_triples):
            i, j, k = sorted(rng.integers(0, n + 1, size=3))
            whole = self.increment(i, k)
            split = chen_mul(self.increment(i, j), self.increment(j, k))
            scale = max(1.0, float(np.linalg.norm(whole.first)),
                        float(np.linalg.norm(whole.second)))
            err = max(
                np.linalg.norm(whole.first - split.first),
                np.linalg.norm(whole.second - split.second),
            )
            if err > rtol * scale:
                return False
        return True


def lift_piecewise_linear(samples, times, control=None) -> RoughPathGrid:
    """Geometric lift of sampled points: per-step (dx, dx (x) dx / 2).

    The second level is the iterated integral of the linear interpolant,
    consistent with Stratonovich integration; `geometric_defect` of every
    step is exactly zero.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    times = np.asarray(times, dtype=float)
    if times.shape[0] != samples.shape[0]:
        raise ValueError("times and samples must align")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    if not np.all(np.isfinite(samples)):
        raise ValueError("samples must be finite")
    dx = np.diff(samples, axis=0)
    seconds = 0.5 * np.einsum("ki,kj->kij", dx, dx)
    control = control if control is not None else HoelderControl()
    return RoughPathGrid(times, dx, seconds, control, start=samples[0])


def line_path(horizon: float, n_steps: int, slope: float = 1.0,
              dim: int = 1, p: float = 3.0) -> RoughPathGrid:
    """Smooth reference driver x_t = slope * t in every component."""
    times = np.linspace(0.0, horizon, n_steps + 1)
    samples = slope * np.tile(times[:, None], (1, dim))
    return lift_piecewise_linear(samples, times, HoelderControl(1.0, p))


def hoelder_exponent_fit(path: RoughPathGrid, k_min: int = 0,
                         k_max: int | None = None) -> float | None:
    """Empirical regularity exponent from dyadic-span increment maxima.

    Least-squares slope of log max_i |X over span 2^k steps| against
    log(2^k * mesh).  Spans default to those with at least 16 windows, which
    keeps the extremal bias of the max statistic small.  Returns None for a
    degenerate (constant) path.
    """
    n = path.n_steps
    if n < 64:
        raise ValueError("need at least 64 steps for a regularity fit")
    if k_max is None:
        k_max = int(math.log2(n)) - 4
    k_max = max(k_max, k_min + 2)
    prefix = path._prefix_first
    xs, ys = [], []
    mesh = path.horizon / n
    for k in range(k_min, k_max + 1):
        span = 2 ** k
        if span > n:
            break
        inc = prefix[span:] - prefix[:-span]
        m = float(np.max(np.linalg.norm(inc, axis=1)))
        if m <= 0.0:
            continue
        xs.append(math.log(span * mesh))
        ys.append(math.log(m))
    if len(xs) < 2:
        return None
    slope = np.polyfit(xs, ys, 1)[0]
    return float(slope)


def write_grid_csv(path: RoughPathGrid, filename) -> None:
    """Write per-step increments as `t, x_1..x_d, xx_11..xx_dd`.

    The first data row anchors the grid: it carries t_0, the start values in
    the x columns and zeros in the xx columns.  Row i >= 1 is the step from
    t_{i-1} to t_i with the second level flattened row-major.
    """
    d = path.dim
    header = (
        ["t"]
        + [f"x_{a + 1}" for a in range(d)]
        + [f"xx_{a + 1}{b + 1}" for a in range(d) for b in range(d)]
    )
    with open(filename, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(
            [repr(float(path.times[0]))]
            + [repr(float(v)) for v in path.start]
            + ["0.0"] * (d * d)
        )
        for i in range(path.n_steps):
            row = (
                [repr(float(path.times[i + 1]))]
                + [repr(float(v)) for v in path.firsts[i]]
                + [repr(float(v)) for v in path.seconds[i].ravel()]
            )
            writer.writerow(row)


def read_grid_csv(filename, control=None, validate: bool = True) -> RoughPathGrid:
    """Read a grid written by `write_grid_csv`; validates Chen consistency."""
    with open(filename, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    n_x = sum(1 for name in header if name.startswith("x_"))
    data = np.asarray(rows)
    if data.shape[1] != 1 + n_x + n_x * n_x:
        raise ValueError(f"malformed grid CSV {filename}")
    times = data[:, 0]
    start = data[0, 1:1 + n_x]
    firsts = data[1:, 1:1 + n_x]
    seconds = data[1:, 1 + n_x:].reshape(-1, n_x, n_x)
    grid = RoughPathGrid(times, firsts, seconds,
                         control if control is not None else HoelderControl(),
                         start=start)
    if validate and not grid.validate_chen():
        raise ValueError(f"grid CSV {filename} failed Chen validation")
    return grid
