"""Binned empirical next-speed transition table and sequential sampler.

The classical lookup-table generator: discretize speeds into fixed-width
bins, count consecutive-pair transitions, normalize rows, then walk the
resulting chain emitting a continuous speed inside each visited bin.  Also
provides the occupancy diagnostic showing how sparsely the table is filled.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import Trip
from .errors import ContractError, DataError, GenerationError
from .validation import as_trips, check_positive, check_speed_range

FORMAT_VERSION = 1


class MarkovSpeedGenerator(BaseEstimator):
    """First-order binned Markov chain over speeds.

    Parameters
    ----------
    bin_width : float, width of each speed bin in m/s.
    v_max : float, upper edge of the binned range; 80 bins by default.
    emission : "uniform" draws the emitted speed uniformly inside the chosen
        bin; "midpoint" emits the bin center.
    """

    def __init__(self, bin_width: float = 0.5, v_max: float = 40.0, emission: str = "uniform"):
        self.bin_width = bin_width
        self.v_max = v_max
        self.emission = emission

    # -- helpers -----------------------------------------------------------

    @property
    def n_bins(self) -> int:
        return int(np.ceil(self.v_max / self.bin_width))

    def bin_of(self, speed) -> np.ndarray:
        idx = np.floor_divide(np.asarray(speed, dtype=float), self.bin_width).astype(int)
        return np.minimum(idx, self.n_bins - 1)

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y=None) -> "MarkovSpeedGenerator":
        """Count consecutive-pair transitions over every trip in X."""
        check_positive("bin_width", self.bin_width)
        check_positive("v_max", self.v_max)
        if self.emission not in ("uniform", "midpoint"):
            raise ContractError(f"emission must be uniform|midpoint, got {self.emission!r}")
        trips = as_trips(X)
        check_speed_range(trips, self.v_max)
        n = self.n_bins
        counts = np.zeros((n, n), dtype=np.int64)
        for trip in trips:
            bins = self.bin_of(trip.speeds)
            np.add.at(counts, (bins[:-1], bins[1:]), 1)
        self._set_counts(counts)
        return self

    def _set_counts(self, counts: np.ndarray) -> None:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.n_bins, self.n_bins) or np.any(counts < 0):
            raise ContractError(f"counts must be non-negative {self.n_bins}x{self.n_bins}")
        row_totals = counts.sum(axis=1)
        probs = np.zeros(counts.shape, dtype=np.float64)
        nonzero = row_totals > 0
        probs[nonzero] = counts[nonzero] / row_totals[nonzero, None]
        self.counts_ = counts
        self.probs_ = probs
        self.row_totals_ = row_totals
        self.empty_rows_ = np.flatnonzero(~nonzero)

    @classmethod
    def from_counts(
        cls, counts, bin_width: float = 0.5, v_max: float = 40.0, emission: str = "uniform"
    ) -> "MarkovSpeedGenerator":
        model = cls(bin_width=bin_width, v_max=v_max, emission=emission)
        model._set_counts(np.asarray(counts))
        return model

    def sample(self, n: int, s0: float = 0.0, seed: int | None = None) -> Trip:
        """Walk the chain for n emissions starting from the bin containing s0."""
        check_is_fitted(self, "probs_")
        if n < 1:
            raise ContractError(f"sample length must be >= 1, got {n}")
        if not (0.0 <= s0 <= self.v_max):
            raise ContractError(f"s0 must lie in [0, {self.v_max}], got {s0}")
        rng = np.random.default_rng(seed)
        cdfs = np.cumsum(self.probs_, axis=1)
        widths = self.bin_width
        current = int(self.bin_of(s0))
        if self.row_totals_[current] == 0:
            raise GenerationError(
                f"start bin {current} has no observed transitions", partial=np.array([])
            )
        speeds = np.empty(n)
        emit_uniform = self.emission == "uniform"
        for i in range(n):
            if emit_uniform:
                speeds[i] = (current + rng.random()) * widths
            else:
                speeds[i] = (current + 0.5) * widths
            if i == n - 1:
                break
            nxt = int(np.searchsorted(cdfs[current], rng.random(), side="right"))
            nxt = min(nxt, self.n_bins - 1)
            if self.row_totals_[nxt] == 0 and i < n - 2:
                raise GenerationError(
                    f"reached bin {nxt} with no observed transitions after {i + 1} steps",
                    partial=speeds[: i + 1].copy(),
                )
            current = nxt
        return Trip(speeds=np.minimum(speeds, self.v_max), id=f"markov-seed{seed}")

    def sample_bins(self, n: int, b0: int, seed: int | None = None) -> np.ndarray:
        """Bin-index walk (no within-bin emission); used for diagnostics."""
        check_is_fitted(self, "probs_")
        rng = np.random.default_rng(seed)
        cdfs = np.cumsum(self.probs_, axis=1)
        out = np.empty(n, dtype=np.int64)
        current = b0
        if self.row_totals_[current] == 0:
            raise GenerationError(f"start bin {current} has no observed transitions")
        draws = rng.random(n)
        for i in range(n):
            current = min(int(np.searchsorted(cdfs[current], draws[i], side="right")), self.n_bins - 1)
            out[i] = current
            if self.row_totals_[current] == 0 and i < n - 1:
                raise GenerationError(
                    f"reached bin {current} with no observed transitions after {i + 1} steps",
                    partial=out[: i + 1].copy(),
                )
        return out

    def occupancy_report(self) -> dict:
        """Sparsity diagnostic: how much of the lookup table is actually filled."""
        check_is_fitted(self, "probs_")
        n = self.n_bins
        row_totals = self.row_totals_
        nonzero_rows = row_totals > 0
        return {
            "n_bins": n,
            "empty_rows": int((~nonzero_rows).sum()),
            "empty_row_fraction": float((~nonzero_rows).mean()),
            "empty_cell_fraction": float((self.counts_ == 0).mean()),
            "min_row_mass": int(row_totals[nonzero_rows].min()) if nonzero_rows.any() else 0,
            "median_row_mass": float(np.median(row_totals[nonzero_rows])) if nonzero_rows.any() else 0.0,
        }

    # -- persistence ------------------------------------------------------------

    def to_json(self) -> str:
        check_is_fitted(self, "counts_")
        return json.dumps(
            {
                "format": "markov-transition-table",
                "version": FORMAT_VERSION,
                "bin_width": self.bin_width,
                "v_max": self.v_max,
                "emission": self.emission,
                "counts": self.counts_.tolist(),
            },
            sort_keys=True,
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> "MarkovSpeedGenerator":
        doc = json.loads(text)
        if doc.get("format") != "markov-transition-table":
            raise DataError("not a transition-table document")
        if doc.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported version {doc.get('version')}")
        return cls.from_counts(
            doc["counts"],
            bin_width=doc["bin_width"],
            v_max=doc["v_max"],
            emission=doc.get("emission", "uniform"),
        )

    @classmethod
    def load(cls, path) -> "MarkovSpeedGenerator":
        return cls.from_json(Path(path).read_text())
