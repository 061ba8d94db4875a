"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .data import Corpus, Trip
from .errors import ContractError, DataError


def check_positive(name: str, value) -> None:
    if not value > 0:
        raise ContractError(f"{name} must be positive, got {value}")


def as_trips(X) -> list[Trip]:
    """Accept a Corpus, a sequence of Trips, or a sequence of speed arrays."""
    if isinstance(X, Corpus):
        return list(X.trips)
    trips = []
    for i, item in enumerate(X):
        if isinstance(item, Trip):
            trips.append(item)
        else:
            trips.append(Trip(speeds=np.asarray(item, dtype=float), id=f"trip-{i:06d}"))
    if not trips:
        raise ContractError("need at least one trip")
    return trips


def check_speed_range(trips, v_max: float) -> None:
    for trip in trips:
        s = trip.speeds
        if s.size and (s.min() < 0.0 or s.max() > v_max):
            idx = int(np.argmax((s < 0.0) | (s > v_max)))
            raise DataError(
                f"trip {trip.id!r} sample {idx}: speed {s[idx]} outside [0, {v_max}]"
            )
