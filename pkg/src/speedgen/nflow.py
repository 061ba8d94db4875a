"""Per-speed-bin normalizing flows and the sequential trajectory sampler.

Each one-dimensional flow is a composition of invertible scalar layers with
closed-form inverse and derivative: affine maps (positive scale) and
sinh-arcsinh warps, both bijections of the real line.  A flow is fitted by
gradient ascent on the exact log-likelihood through the change of variables.
The ensemble holds one flow per 0.5 m/s speed bin; trajectories are grown
sequentially by sampling the next speed from the flow of the bin containing
the current speed.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import AdamState, Tape, adam_step, clip_by_global_norm, paused_gc
from .data import Trip
from .errors import ContractError, DataError, DivergenceError, UntrainedBinError
from .validation import as_trips, check_positive, check_speed_range

LOG_2PI = math.log(2.0 * math.pi)
FORMAT_VERSION = 1


class AffineLayer:
    """x = exp(log_scale) * z + shift; strictly increasing on all reals."""

    kind = "affine"
    param_names = ("log_scale", "shift")

    def __init__(self, log_scale: float = 0.0, shift: float = 0.0):
        self.log_scale = float(log_scale)
        self.shift = float(shift)

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    def forward_values(self, z):
        return np.exp(self.log_scale) * np.asarray(z, dtype=float) + self.shift

    def inverse_values(self, x):
        return (np.asarray(x, dtype=float) - self.shift) * np.exp(-self.log_scale)

    def log_deriv_values(self, z):
        return np.full_like(np.asarray(z, dtype=float), self.log_scale)

    def inverse_t(self, tape: Tape, leaves: dict, x):
        return tape.mul(
            tape.sub(x, leaves["shift"]), tape.exp(tape.neg(leaves["log_scale"]))
        )

    def log_deriv_t(self, tape: Tape, leaves: dict, z):
        return leaves["log_scale"]


class SinhArcsinhLayer:
    """x = sinh(skew + exp(log_tail) * asinh(z)); reshapes skew and tails.

    Bijective on the reals with closed-form inverse and derivative, unlike a
    scaled tanh whose bounded image would leave the inverse undefined for
    most observations.
    """

    kind = "sinh_arcsinh"
    param_names = ("skew", "log_tail")

    def __init__(self, skew: float = 0.0, log_tail: float = 0.0):
        self.skew = float(skew)
        self.log_tail = float(log_tail)

    def forward_values(self, z):
        b = np.exp(self.log_tail)
        return np.sinh(self.skew + b * np.arcsinh(np.asarray(z, dtype=float)))

    def inverse_values(self, x):
        b = np.exp(self.log_tail)
        return np.sinh((np.arcsinh(np.asarray(x, dtype=float)) - self.skew) / b)

    def log_deriv_values(self, z):
        z = np.asarray(z, dtype=float)
        b = np.exp(self.log_tail)
        w = self.skew + b * np.arcsinh(z)
        logcosh = np.abs(w) + np.log1p(np.exp(-2.0 * np.abs(w))) - math.log(2.0)
        return self.log_tail + logcosh - 0.5 * np.log1p(z * z)

    def inverse_t(self, tape: Tape, leaves: dict, x):
        arg = tape.mul(
            tape.sub(tape.asinh(x), leaves["skew"]),
            tape.exp(tape.neg(leaves["log_tail"])),
        )
        return tape.sinh(arg)

    def log_deriv_t(self, tape: Tape, leaves: dict, z):
        w = tape.add(
            leaves["skew"], tape.mul(tape.exp(leaves["log_tail"]), tape.asinh(z))
        )
        half_log1p = tape.mul(
            tape.constant([[0.5]]),
            tape.log(tape.add(tape.square(z), tape.constant([[1.0]]))),
        )
        return tape.sub(tape.add(leaves["log_tail"], tape.logcosh(w)), half_log1p)


LAYER_KINDS = {cls.kind: cls for cls in (AffineLayer, SinhArcsinhLayer)}


def default_layers(mean: float = 0.0, std: float = 1.0, n_layers: int = 4) -> list:
    """Alternating warp/affine stack ending in a moment-matched affine."""
    if n_layers < 1:
        raise ContractError("flow needs at least one layer")
    layers = []
    for i in range(n_layers - 1):
        if i % 2 == 0:
            layers.append(SinhArcsinhLayer())
        else:
            layers.append(AffineLayer())
    layers.append(AffineLayer(log_scale=math.log(max(std, 1e-3)), shift=mean))
    return layers


class ScalarFlow:
    """Composition of invertible scalar layers over a standard-normal base.

    Layers are stored in application order: ``forward`` maps base samples z
    through layers[0], layers[1], ... to data space.
    """

    def __init__(self, layers: list):
        if not layers:
            raise ContractError("flow needs at least one layer")
        self.layers = list(layers)
        self.history_ = []

    # -- calculus -------------------------------------------------------

    def forward(self, z):
        out = np.asarray(z, dtype=float)
        for layer in self.layers:
            out = layer.forward_values(out)
        return out

    def inverse(self, x):
        out = np.asarray(x, dtype=float)
        for layer in reversed(self.layers):
            out = layer.inverse_values(out)
        return out

    def log_det_jacobian(self, z):
        """Sum of each layer's log-|derivative| at its own input, forward order."""
        cur = np.asarray(z, dtype=float)
        total = np.zeros_like(cur)
        for layer in self.layers:
            total = total + layer.log_deriv_values(cur)
            cur = layer.forward_values(cur)
        return total

    def log_likelihood(self, x):
        """Exact log density via the inverse sweep and base-normal density."""
        cur = np.asarray(x, dtype=float)
        total = np.zeros_like(cur)
        for layer in reversed(self.layers):
            cur = layer.inverse_values(cur)
            total = total - layer.log_deriv_values(cur)
        return total - 0.5 * cur * cur - 0.5 * LOG_2PI

    def support_interval(self, z_limit: float = 9.0) -> tuple[float, float]:
        """Data-space interval carrying all but ~1e-18 of the base mass."""
        return float(self.forward(-z_limit)), float(self.forward(z_limit))

    # -- parameter plumbing ------------------------------------------------

    def named_params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                out[f"l{i}.{name}"] = np.array([[getattr(layer, name)]])
        return out

    def _apply_params(self, arrays: dict) -> None:
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                setattr(layer, name, float(arrays[f"l{i}.{name}"][0, 0]))

    # -- estimation ---------------------------------------------------------

    def _mean_ll_tape(self, x_values: np.ndarray):
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in self.named_params().items()}
        cur = tape.constant(x_values.reshape(1, -1))
        terms = []
        for i in reversed(range(len(self.layers))):
            sub = {name: leaves[f"l{i}.{name}"] for name in self.layers[i].param_names}
            cur = self.layers[i].inverse_t(tape, sub, cur)
            terms.append(tape.mean(self.layers[i].log_deriv_t(tape, sub, cur)))
        ll = tape.sub(
            tape.constant([[-0.5 * LOG_2PI]]),
            tape.mul(tape.constant([[0.5]]), tape.mean(tape.square(cur))),
        )
        for term in terms:
            ll = tape.sub(ll, term)
        return tape, leaves, ll

    def fit(
        self,
        samples,
        epochs: int = 400,
        lr: float = 0.05,
        seed: int = 0,
        jitter: float = 0.0,
        grad_clip: float = 10.0,
    ) -> "ScalarFlow":
        """Maximize mean log-likelihood with Adam; deterministic per seed."""
        x = np.asarray(samples, dtype=float).reshape(-1)
        if x.size < 2:
            raise ContractError(f"need at least 2 samples to fit a flow, got {x.size}")
        rng = np.random.default_rng(seed)
        if jitter > 0.0:
            x = x + rng.uniform(0.0, jitter, size=x.size)
        params = self.named_params()
        state = AdamState.for_params(params)
        self.history_ = []
        with paused_gc():
            for epoch in range(epochs):
                self._apply_params(params)
                tape, leaves, ll = self._mean_ll_tape(x)
                ll_value = ll.item()
                if not math.isfinite(ll_value):
                    raise DivergenceError(f"flow fit diverged at epoch {epoch}")
                if epoch % 10 == 0:
                    self.history_.append(ll_value)
                grads = tape.gradients(ll)
                neg = {k: -grads[leaves[k]] for k in params}
                neg, _ = clip_by_global_norm(neg, grad_clip)
                params, state = adam_step(params, neg, state, lr=lr)
        self._apply_params(params)
        self.history_.append(self._mean_ll_tape(x)[2].item())
        return self

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"kind": layer.kind, "params": {n: getattr(layer, n) for n in layer.param_names}}
                for layer in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScalarFlow":
        layers = []
        for spec in doc["layers"]:
            klass = LAYER_KINDS.get(spec["kind"])
            if klass is None:
                raise DataError(f"unknown flow layer kind {spec['kind']!r}")
            layers.append(klass(**spec["params"]))
        return cls(layers)


class FlowEnsembleGenerator(BaseEstimator):
    """One flow per speed bin plus the sequential next-speed sampler.

    fit() collects, for every bin, the speeds observed immediately after a
    visit to that bin, and fits that bin's flow on them.  Bins with fewer
    than ``min_bin_samples`` observations stay untrained; reaching one during
    generation raises with the partial trajectory attached.
    """

    def __init__(
        self,
        bin_width: float = 0.5,
        v_max: float = 40.0,
        n_layers: int = 4,
        epochs: int = 400,
        learning_rate: float = 0.05,
        min_bin_samples: int = 50,
        dequantize: float = 0.01,
        seed: int = 0,
        n_jobs: int = 1,
    ):
        self.bin_width = bin_width
        self.v_max = v_max
        self.n_layers = n_layers
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.min_bin_samples = min_bin_samples
        self.dequantize = dequantize
        self.seed = seed
        self.n_jobs = n_jobs

    @property
    def n_bins(self) -> int:
        return int(np.ceil(self.v_max / self.bin_width))

    def bin_of(self, speed) -> np.ndarray:
        idx = np.floor_divide(np.asarray(speed, dtype=float), self.bin_width).astype(int)
        return np.minimum(idx, self.n_bins - 1)

    def fit(self, X, y=None) -> "FlowEnsembleGenerator":
        check_positive("bin_width", self.bin_width)
        check_positive("epochs", self.epochs)
        trips = as_trips(X)
        check_speed_range(trips, self.v_max)
        buckets: list[list] = [[] for _ in range(self.n_bins)]
        for trip in trips:
            s = trip.speeds
            bins = self.bin_of(s[:-1])
            for b, nxt in zip(bins, s[1:]):
                buckets[b].append(nxt)
        seeds = np.random.SeedSequence(self.seed).spawn(self.n_bins)

        def fit_bin(i):
            samples = buckets[i]
            if len(samples) < self.min_bin_samples:
                return None
            arr = np.asarray(samples)
            flow = ScalarFlow(
                default_layers(float(arr.mean()), float(arr.std()), self.n_layers)
            )
            flow.fit(
                arr,
                epochs=self.epochs,
                lr=self.learning_rate,
                seed=int(seeds[i].generate_state(1)[0]),
                jitter=self.dequantize,
            )
            return flow

        if self.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                self.models_ = list(pool.map(fit_bin, range(self.n_bins)))
        else:
            self.models_ = [fit_bin(i) for i in range(self.n_bins)]
        self.bin_counts_ = np.array([len(b) for b in buckets])
        self.trained_bins_ = np.flatnonzero([m is not None for m in self.models_])
        return self

    def generate(self, n: int, seed: int | None = None) -> Trip:
        """Sequential sampler: start at rest, draw each next speed from the
        flow of the current speed's bin.  Returns n + 1 speeds."""
        check_is_fitted(self, "models_")
        if n < 1:
            raise ContractError(f"trajectory length must be >= 1, got {n}")
        rng = np.random.default_rng(seed)
        speeds = np.empty(n + 1)
        speeds[0] = 0.0
        s = 0.0
        clamped = 0
        for i in range(1, n + 1):
            j = int(self.bin_of(s))
            model = self.models_[j]
            if model is None:
                raise UntrainedBinError(
                    j,
                    f"bin {j} (speeds [{j * self.bin_width}, {(j + 1) * self.bin_width}) m/s) "
                    f"has no trained flow ({self.bin_counts_[j]} samples)",
                    partial=speeds[:i].copy(),
                )
            raw = float(model.forward(rng.normal()))
            nxt = min(max(raw, 0.0), self.v_max)
            if nxt != raw:
                clamped += 1
            speeds[i] = nxt
            s = nxt
        self.clamp_events_ = clamped
        return Trip(speeds=speeds, id=f"nfg-seed{seed}")

    def sample_bin(self, bin_index: int, size: int, seed: int | None = None) -> np.ndarray:
        """Raw (unclamped) draws from one bin's fitted next-speed flow."""
        check_is_fitted(self, "models_")
        model = self.models_[bin_index]
        if model is None:
            raise UntrainedBinError(bin_index, f"bin {bin_index} has no trained flow")
        rng = np.random.default_rng(seed)
        return model.forward(rng.normal(size=size))

    # -- persistence ------------------------------------------------------------

    def to_json(self) -> str:
        check_is_fitted(self, "models_")
        return json.dumps(
            {
                "format": "flow-ensemble",
                "version": FORMAT_VERSION,
                "bin_width": self.bin_width,
                "v_max": self.v_max,
                "n_layers": self.n_layers,
                "epochs": self.epochs,
                "learning_rate": self.learning_rate,
                "min_bin_samples": self.min_bin_samples,
                "dequantize": self.dequantize,
                "seed": self.seed,
                "bin_counts": self.bin_counts_.tolist(),
                "bins": [m.to_dict() if m is not None else None for m in self.models_],
            },
            sort_keys=True,
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_json(cls, text: str) -> "FlowEnsembleGenerator":
        doc = json.loads(text)
        if doc.get("format") != "flow-ensemble":
            raise DataError("not a flow-ensemble document")
        if doc.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported version {doc.get('version')}")
        model = cls(
            bin_width=doc["bin_width"],
            v_max=doc["v_max"],
            n_layers=doc["n_layers"],
            epochs=doc["epochs"],
            learning_rate=doc["learning_rate"],
            min_bin_samples=doc["min_bin_samples"],
            dequantize=doc.get("dequantize", 0.0),
            seed=doc["seed"],
        )
        model.models_ = [
            ScalarFlow.from_dict(b) if b is not None else None for b in doc["bins"]
        ]
        model.bin_counts_ = np.asarray(doc["bin_counts"])
        model.trained_bins_ = np.flatnonzero([m is not None for m in model.models_])
        return model

    @classmethod
    def load(cls, path) -> "FlowEnsembleGenerator":
        return cls.from_json(Path(path).read_text())
