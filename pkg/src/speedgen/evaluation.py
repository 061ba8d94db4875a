"""Density-based validation: speed/acceleration histograms, distances between
them, and constraint-satisfaction checks for generated corpora."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError
from .validation import as_trips

DEFAULT_SAMPLE_POINTS = 30_000
ZERO_SPEED_TOL = 0.1  # m/s; "at rest" for continuous generated values
KL_EPS = 1e-9


@dataclass
class DensityHistogram:
    """Normalized histogram over fixed bin edges."""

    bin_edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.mass = np.asarray(self.mass, dtype=float)
        if self.bin_edges.ndim != 1 or self.bin_edges.size != self.mass.size + 1:
            raise ContractError("need len(bin_edges) == len(mass) + 1")
        if np.any(np.diff(self.bin_edges) <= 0):
            raise ContractError("bin edges must be strictly ascending")
        if np.any(self.mass < 0) or abs(self.mass.sum() - 1.0) > 1e-12:
            raise ContractError("histogram mass must be non-negative and sum to 1")

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])


def speed_edges(v_max: float = 40.0, bin_width: float = 0.5) -> np.ndarray:
    return np.arange(0.0, v_max + bin_width / 2, bin_width)


def accel_edges(lo: float = -5.0, hi: float = 5.0, bin_width: float = 0.1) -> np.ndarray:
    return np.arange(lo, hi + bin_width / 2, bin_width)


def accel_series(trip) -> np.ndarray:
    """First differences a_t = s_t - s_{t-1} in m/s^2."""
    speeds = np.asarray(getattr(trip, "speeds", trip), dtype=float)
    if speeds.size < 2:
        raise ContractError(f"need at least 2 samples for accelerations, got {speeds.size}")
    return np.diff(speeds)


def density(values, bin_edges, clamp: bool = True) -> DensityHistogram:
    """Normalized histogram of values over the given edges."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size == 0:
        raise DataError("cannot build a density from no values")
    edges = np.asarray(bin_edges, dtype=float)
    if clamp:
        values = np.clip(values, edges[0], edges[-1])
    elif values.min() < edges[0] or values.max() > edges[-1]:
        raise DataError(
            f"values outside [{edges[0]}, {edges[-1]}] with clamping disabled"
        )
    counts, _ = np.histogram(values, bins=edges)
    return DensityHistogram(bin_edges=edges, mass=counts / counts.sum())


def distance(h1: DensityHistogram, h2: DensityHistogram, metric: str, kl_eps: float = KL_EPS) -> float:
    """TV, KL, or discrete W1 between histograms on identical edges."""
    if h1.bin_edges.shape != h2.bin_edges.shape or not np.array_equal(h1.bin_edges, h2.bin_edges):
        raise ContractError("histograms must share identical bin edges")
    p, q = h1.mass, h2.mass
    if metric == "tv":
        return float(0.5 * np.sum(np.abs(p - q)))
    if metric == "kl":
        ps = (p + kl_eps) / (1.0 + kl_eps * p.size)
        qs = (q + kl_eps) / (1.0 + kl_eps * q.size)
        return float(np.sum(ps * np.log(ps / qs)))
    if metric == "w1":
        widths = np.diff(h1.bin_edges)
        return float(np.sum(np.abs(np.cumsum(p) - np.cumsum(q)) * widths))
    raise ContractError(f"unknown metric {metric!r}; choose tv|kl|w1")


def sample_points(values, n: int, seed: int | None = None, replace: bool = False) -> np.ndarray:
    """Seeded subsample of a value pool, without replacement by default."""
    values = np.asarray(values, dtype=float).reshape(-1)
    if not replace and values.size < n:
        raise ContractError(f"pool has {values.size} values, cannot draw {n} without replacement")
    rng = np.random.default_rng(seed)
    return rng.choice(values, size=n, replace=replace)


def constraint_check(trips, c_target=None, zero_tol: float = ZERO_SPEED_TOL) -> dict:
    """Start/end-at-rest rates, plus realized-distance errors when targets given.

    c_target may be a scalar length in meters applied to every trip or one
    value per trip.
    """
    trips = as_trips(trips)
    starts = np.array([abs(t.speeds[0]) < zero_tol for t in trips])
    ends = np.array([abs(t.speeds[-1]) < zero_tol for t in trips])
    report = {
        "n_trips": len(trips),
        "start_zero_rate": float(starts.mean()),
        "end_zero_rate": float(ends.mean()),
    }
    if c_target is not None:
        targets = np.asarray(c_target, dtype=float).reshape(-1)
        if targets.size == 1:
            targets = np.full(len(trips), targets[0])
        if targets.size != len(trips):
            raise ContractError(f"{targets.size} targets for {len(trips)} trips")
        realized = np.array([float(np.sum(t.speeds)) for t in trips])
        rel_err = np.abs(realized - targets) / targets
        report.update(
            {
                "distance_mean_abs_rel_error": float(rel_err.mean()),
                "distance_max_abs_rel_error": float(rel_err.max()),
                "distance_mean_realized_m": float(realized.mean()),
            }
        )
    return report


@dataclass
class ComparisonReport:
    """Quantified version of the visual density comparison protocol."""

    speed_tv: float
    speed_kl: float
    speed_w1: float
    accel_tv: float
    accel_w1: float
    n_points: int
    start_zero_rate: float
    end_zero_rate: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def pool_speeds(trips) -> np.ndarray:
    return np.concatenate([t.speeds for t in as_trips(trips)])


def pool_accels(trips) -> np.ndarray:
    return np.concatenate([accel_series(t) for t in as_trips(trips)])


def compare_corpora(
    generated,
    reference,
    n_points: int = DEFAULT_SAMPLE_POINTS,
    seed: int = 0,
    v_max: float = 40.0,
    speed_bin: float = 0.5,
    accel_bin: float = 0.1,
    accel_limit: float = 5.0,
) -> tuple[ComparisonReport, dict]:
    """Density comparison on n_points-per-side samples of speeds and accels.

    Returns the report plus the four histograms (for CSV export / plotting).
    """
    gen_trips = as_trips(generated)
    ref_trips = as_trips(reference)
    s_edges = speed_edges(v_max, speed_bin)
    a_edges = accel_edges(-accel_limit, accel_limit, accel_bin)

    def sampled(pool, n, sub_seed):
        n_eff = min(n, pool.size)
        return sample_points(pool, n_eff, seed=sub_seed)

    gen_speed = density(sampled(pool_speeds(gen_trips), n_points, seed), s_edges)
    ref_speed = density(sampled(pool_speeds(ref_trips), n_points, seed + 1), s_edges)
    gen_accel = density(sampled(pool_accels(gen_trips), n_points, seed + 2), a_edges)
    ref_accel = density(sampled(pool_accels(ref_trips), n_points, seed + 3), a_edges)

    constraints = constraint_check(gen_trips)
    report = ComparisonReport(
        speed_tv=distance(gen_speed, ref_speed, "tv"),
        speed_kl=distance(gen_speed, ref_speed, "kl"),
        speed_w1=distance(gen_speed, ref_speed, "w1"),
        accel_tv=distance(gen_accel, ref_accel, "tv"),
        accel_w1=distance(gen_accel, ref_accel, "w1"),
        n_points=n_points,
        start_zero_rate=constraints["start_zero_rate"],
        end_zero_rate=constraints["end_zero_rate"],
    )
    histograms = {
        "generated_speed": gen_speed,
        "reference_speed": ref_speed,
        "generated_accel": gen_accel,
        "reference_accel": ref_accel,
    }
    return report, histograms


def export_density_csv(hist: DensityHistogram, path) -> None:
    """Two-column CSV (bin_center, mass) for external plotting."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_center", "mass"])
        for center, mass in zip(hist.centers, hist.mass):
            writer.writerow([repr(float(center)), repr(float(mass))])
