"""Trip ingestion, validation, synthetic corpus generation, and context features.

The on-disk interchange format is a flat CSV with header
``trip_id,timestamp,speed_mps[,lon,lat]``: one row per second of driving,
speeds in m/s.  Trips are delimited by a change of trip_id or a timestamp gap
larger than a threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DataError

CSV_FIELDS = ("trip_id", "timestamp", "speed_mps", "lon", "lat")

# documented synthetic-profile constants; chosen for kinematic plausibility,
# not fitted to any dataset.  Acceleration/braking phases hold a tight
# characteristic rate (~2 m/s^2) so trips have the sustained-ramp structure
# real drive cycles show.
MAX_ACCEL = 3.0  # m/s^2 hard bound on per-step speed change
PHASE_RATE_MEAN = 2.0  # m/s^2 typical sustained accel/brake magnitude
PHASE_RATE_STD = 0.15
CRUISE_PULL = 0.2  # mean reversion toward the segment's target speed
CRUISE_NOISE = 0.25  # m/s^2 cruise speed jitter
PROFILE_BANDS = {
    "urban": (8.0, 16.0),
    "highway": (24.0, 32.0),
    "mixed": (10.0, 30.0),
}
PROFILE_STOP_PROB = {"urban": 0.6, "highway": 0.1, "mixed": 0.5}
PROFILE_CRUISE_STEPS = {"urban": (8, 40), "highway": (30, 120), "mixed": (6, 36)}
SYNTH_SPEED_CAP = 35.0  # m/s; keeps synthetic data inside the validated range
MIN_TRIP_SECONDS = 100
MAX_TRIP_SECONDS = 6330


@dataclass(eq=False)
class Trip:
    """A 1 Hz speed trajectory with optional geo columns."""

    speeds: np.ndarray
    id: str = ""
    t0: float = 0.0
    lon: np.ndarray | None = None
    lat: np.ndarray | None = None

    def __post_init__(self):
        self.speeds = np.asarray(self.speeds, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return self.speeds.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trip):
            return NotImplemented
        same_geo = (self.lon is None) == (other.lon is None) and (
            (self.lat is None) == (other.lat is None)
        )
        if not same_geo:
            return False
        return (
            self.id == other.id
            and self.t0 == other.t0
            and np.array_equal(self.speeds, other.speeds)
            and (self.lon is None or np.array_equal(self.lon, other.lon))
            and (self.lat is None or np.array_equal(self.lat, other.lat))
        )

    @property
    def distance(self) -> float:
        """Trip distance in meters under the 1 Hz rectangle rule."""
        return float(np.cumsum(self.speeds)[-1]) if len(self) else 0.0


@dataclass
class ContextFeatures:
    """Distance context: total length L and per-step remaining distance d."""

    length_m: float
    remaining_m: np.ndarray
    condition: np.ndarray | None = None


@dataclass(frozen=True)
class CorpusStats:
    n_trips: int
    total_points: int
    length_min: int
    length_max: int
    speed_max: float
    speed_mean: float
    speed_var: float


class Corpus:
    """An immutable list of trips with consistent summary statistics."""

    def __init__(self, trips):
        self.trips = tuple(trips)
        if not self.trips:
            raise ContractError("corpus must contain at least one trip")
        lengths = [len(t) for t in self.trips]
        allspeeds = np.concatenate([t.speeds for t in self.trips])
        self.stats = CorpusStats(
            n_trips=len(self.trips),
            total_points=int(allspeeds.size),
            length_min=min(lengths),
            length_max=max(lengths),
            speed_max=float(allspeeds.max()),
            speed_mean=float(allspeeds.mean()),
            speed_var=float(allspeeds.var()),
        )

    def __len__(self) -> int:
        return len(self.trips)

    def __iter__(self):
        return iter(self.trips)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        return list(self.trips) == list(other.trips)

    def all_speeds(self) -> np.ndarray:
        return np.concatenate([t.speeds for t in self.trips])

    def speed_histogram(self, bin_width: float = 0.5, v_max: float = 40.0):
        edges = np.arange(0.0, v_max + bin_width, bin_width)
        hist, _ = np.histogram(self.all_speeds(), bins=edges)
        return hist, edges


def context(trip: Trip) -> ContextFeatures:
    """L and the running distance-to-go d_t = L - sum_{i<=t} s_i.

    Uses the cumulative sum's own final element as L so the last remaining
    distance is exactly zero.
    """
    csum = np.cumsum(trip.speeds)
    length = float(csum[-1])
    return ContextFeatures(length_m=length, remaining_m=length - csum)


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


def _phase_rate(rng) -> float:
    return float(np.clip(rng.normal(PHASE_RATE_MEAN, PHASE_RATE_STD), 1.2, MAX_ACCEL))


def _synth_trip(rng: np.random.Generator, n: int, profile: str) -> np.ndarray:
    lo, hi = PROFILE_BANDS[profile]
    stop_prob = PROFILE_STOP_PROB[profile]
    cruise_lo, cruise_hi = PROFILE_CRUISE_STEPS[profile]

    speeds = [0.0]
    s = 0.0
    # reserve enough room to brake to zero at the typical rate plus a dwell
    def room_left():
        return n - len(speeds) - int(np.ceil(s / 1.2)) - 3

    while room_left() > 0:
        target = rng.uniform(lo, hi)
        while s < target - 0.5 and room_left() > 0:
            s = min(s + _phase_rate(rng), target, SYNTH_SPEED_CAP)
            speeds.append(s)
        hold = int(rng.integers(cruise_lo, cruise_hi + 1))
        for _ in range(hold):
            if room_left() <= 0:
                break
            drift = CRUISE_PULL * (target - s) + rng.normal(0.0, CRUISE_NOISE)
            s = float(np.clip(s + np.clip(drift, -MAX_ACCEL, MAX_ACCEL), 0.0, SYNTH_SPEED_CAP))
            speeds.append(s)
        # sometimes come to a complete stop mid-trip
        if rng.random() < stop_prob:
            while s > 0.0 and len(speeds) + 2 < n:
                s = max(0.0, s - _phase_rate(rng))
                speeds.append(s)
            dwell = int(rng.integers(2, 11))
            for _ in range(dwell):
                if room_left() <= 0:
                    break
                speeds.append(0.0)
    # final braking, then dwell at zero to exact length
    while s > 0.0 and len(speeds) < n:
        s = max(0.0, s - _phase_rate(rng))
        speeds.append(s)
    while len(speeds) < n:
        speeds.append(0.0)
    return np.asarray(speeds[:n])


def synth_corpus(
    n_trips: int,
    length_range: tuple[int, int] = (MIN_TRIP_SECONDS, MAX_TRIP_SECONDS),
    seed: int = 0,
    profile: str = "mixed",
) -> Corpus:
    """Kinematically plausible trips: ramp up, cruise, brake, dwell.

    Every trip starts and ends at exactly 0 m/s and respects the 3 m/s^2
    per-step bound.  Deterministic for a given seed; per-trip seeds are
    spawned so trips are independent of corpus-level ordering.
    """
    if n_trips < 1:
        raise ContractError("n_trips must be >= 1")
    lo, hi = int(length_range[0]), int(length_range[1])
    if lo < MIN_TRIP_SECONDS or hi > MAX_TRIP_SECONDS or lo > hi:
        raise ContractError(
            f"length_range must lie within [{MIN_TRIP_SECONDS}, {MAX_TRIP_SECONDS}], got {length_range}"
        )
    if profile not in PROFILE_BANDS:
        raise ContractError(f"unknown profile {profile!r}; choose from {sorted(PROFILE_BANDS)}")
    children = np.random.SeedSequence(seed).spawn(n_trips)
    trips = []
    for i, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        n = int(rng.integers(lo, hi + 1))
        trips.append(Trip(speeds=_synth_trip(rng, n, profile), id=f"synth-{i:06d}", t0=float(i * 10000)))
    return Corpus(trips)


# ---------------------------------------------------------------------------
# CSV ingest / export
# ---------------------------------------------------------------------------


def ingest_csv(
    path,
    v_max: float = 40.0,
    gap_threshold: float = 5.0,
    min_trip_len: int = 2,
) -> Corpus:
    """Read trips from CSV, splitting on id change or timestamp gap."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[:3] != list(CSV_FIELDS[:3]):
            raise DataError(
                f"{path}: expected header starting with {','.join(CSV_FIELDS[:3])}, got {','.join(header)}"
            )
        has_geo = len(header) >= 5 and header[3] == "lon" and header[4] == "lat"
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                trip_id = row[0]
                ts = float(row[1])
                speed = float(row[2])
                geo = None
                if has_geo and row[3] != "" and row[4] != "":
                    geo = (float(row[3]), float(row[4]))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row!r}") from exc
            if not (0.0 <= speed <= v_max):
                raise DataError(
                    f"{path}:{lineno}: speed {speed} outside [0, {v_max}] in trip {trip_id!r}"
                )
            rows.append((trip_id, ts, speed, geo, lineno))
    if not rows:
        raise DataError(f"{path}: no data rows")

    trips = []

    def flush(chunk):
        if len(chunk) < min_trip_len:
            raise DataError(
                f"{path}:{chunk[0][4]}: trip {chunk[0][0]!r} has {len(chunk)} samples, need >= {min_trip_len}"
            )
        geo_ok = all(r[3] is not None for r in chunk)
        trips.append(
            Trip(
                speeds=np.array([r[2] for r in chunk]),
                id=chunk[0][0],
                t0=chunk[0][1],
                lon=np.array([r[3][0] for r in chunk]) if geo_ok else None,
                lat=np.array([r[3][1] for r in chunk]) if geo_ok else None,
            )
        )

    chunk = [rows[0]]
    for row in rows[1:]:
        prev = chunk[-1]
        if row[0] != prev[0] or (row[1] - prev[1]) > gap_threshold:
            flush(chunk)
            chunk = [row]
        else:
            chunk.append(row)
    flush(chunk)
    return Corpus(trips)


def export_csv(corpus: Corpus, path) -> None:
    """Write a corpus in the standard schema; floats round-trip exactly."""
    path = Path(path)
    any_geo = any(t.lon is not None and t.lat is not None for t in corpus)
    fields = CSV_FIELDS if any_geo else CSV_FIELDS[:3]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for trip in corpus:
            for i, s in enumerate(trip.speeds):
                row = [trip.id, repr(trip.t0 + i), repr(float(s))]
                if any_geo:
                    if trip.lon is not None:
                        row += [repr(float(trip.lon[i])), repr(float(trip.lat[i]))]
                    else:
                        row += ["", ""]
                writer.writerow(row)
