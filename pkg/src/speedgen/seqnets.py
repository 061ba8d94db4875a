"""Sequence network building blocks: RNN/LSTM cells, stacks, MLPs, and the
recurrent encoder/decoder pair used by the trajectory generators.

Parameter bundles are plain dataclasses of float64 numpy arrays (immutable
value objects by convention).  Every forward computation runs on an explicit
``Tape``; ``Bound*`` wrappers hold the parameter leaves for one tape so the
same weights can be reused across timesteps.  Column convention throughout:
signals are (features x batch), weight matrices multiply from the left.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor
from .errors import ContractError

GATES = ("f", "i", "o", "g")


def uniform_init(rng: np.random.Generator, rows: int, cols: int, fan_in: int) -> np.ndarray:
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=(rows, cols))


# ---------------------------------------------------------------------------
# parameter bundles
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class RnnCellParams:
    """Vanilla recurrent cell: h' = tanh(theta_hh @ h + theta_sh @ s + b_h)."""

    theta_hh: np.ndarray  # (H, H)
    theta_sh: np.ndarray  # (H, D_in)
    b_h: np.ndarray  # (H, 1)

    def __post_init__(self):
        h = self.theta_hh.shape[0]
        if self.theta_hh.shape != (h, h) or self.theta_sh.shape[0] != h or self.b_h.shape != (h, 1):
            raise ContractError(
                f"inconsistent RNN cell shapes: hh={self.theta_hh.shape} "
                f"sh={self.theta_sh.shape} b={self.b_h.shape}"
            )

    @property
    def hidden(self) -> int:
        return self.theta_hh.shape[0]

    @property
    def input_dim(self) -> int:
        return self.theta_sh.shape[1]

    @classmethod
    def init(cls, rng, hidden: int, input_dim: int) -> "RnnCellParams":
        return cls(
            theta_hh=uniform_init(rng, hidden, hidden, hidden),
            theta_sh=uniform_init(rng, hidden, input_dim, input_dim),
            b_h=np.zeros((hidden, 1)),
        )

    def named_arrays(self, prefix: str = "") -> dict:
        return {
            f"{prefix}theta_hh": self.theta_hh,
            f"{prefix}theta_sh": self.theta_sh,
            f"{prefix}b_h": self.b_h,
        }


@dataclass(eq=False)
class LstmCellParams:
    """All weights of one LSTM cell, input side (H x D_in), recurrent (H x H).

    Gate order everywhere is f (forget), i (input), o (output), g (candidate).
    """

    w_sf: np.ndarray
    w_si: np.ndarray
    w_so: np.ndarray
    w_gs: np.ndarray
    w_hf: np.ndarray
    w_hi: np.ndarray
    w_ho: np.ndarray
    w_gh: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray

    def __post_init__(self):
        h, d = self.w_sf.shape
        for w in (self.w_si, self.w_so, self.w_gs):
            if w.shape != (h, d):
                raise ContractError(f"input-gate weight shape {w.shape} != {(h, d)}")
        for w in (self.w_hf, self.w_hi, self.w_ho, self.w_gh):
            if w.shape != (h, h):
                raise ContractError(f"recurrent-gate weight shape {w.shape} != {(h, h)}")
        for b in (self.b_f, self.b_i, self.b_o, self.b_c):
            if b.shape != (h, 1):
                raise ContractError(f"bias shape {b.shape} != {(h, 1)}")

    @property
    def hidden(self) -> int:
        return self.w_sf.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_sf.shape[1]

    @classmethod
    def init(cls, rng, hidden: int, input_dim: int, forget_bias: float = 1.0) -> "LstmCellParams":
        # positive forget bias keeps early cell memory alive over long unrolls
        sw = {g: uniform_init(rng, hidden, input_dim, input_dim) for g in GATES}
        hw = {g: uniform_init(rng, hidden, hidden, hidden) for g in GATES}
        return cls(
            w_sf=sw["f"], w_si=sw["i"], w_so=sw["o"], w_gs=sw["g"],
            w_hf=hw["f"], w_hi=hw["i"], w_ho=hw["o"], w_gh=hw["g"],
            b_f=np.full((hidden, 1), forget_bias), b_i=np.zeros((hidden, 1)),
            b_o=np.zeros((hidden, 1)), b_c=np.zeros((hidden, 1)),
        )

    @classmethod
    def zeros(cls, hidden: int, input_dim: int) -> "LstmCellParams":
        z = np.zeros
        return cls(
            w_sf=z((hidden, input_dim)), w_si=z((hidden, input_dim)),
            w_so=z((hidden, input_dim)), w_gs=z((hidden, input_dim)),
            w_hf=z((hidden, hidden)), w_hi=z((hidden, hidden)),
            w_ho=z((hidden, hidden)), w_gh=z((hidden, hidden)),
            b_f=z((hidden, 1)), b_i=z((hidden, 1)), b_o=z((hidden, 1)), b_c=z((hidden, 1)),
        )

    def named_arrays(self, prefix: str = "") -> dict:
        return {
            f"{prefix}w_sf": self.w_sf, f"{prefix}w_si": self.w_si,
            f"{prefix}w_so": self.w_so, f"{prefix}w_gs": self.w_gs,
            f"{prefix}w_hf": self.w_hf, f"{prefix}w_hi": self.w_hi,
            f"{prefix}w_ho": self.w_ho, f"{prefix}w_gh": self.w_gh,
            f"{prefix}b_f": self.b_f, f"{prefix}b_i": self.b_i,
            f"{prefix}b_o": self.b_o, f"{prefix}b_c": self.b_c,
        }


@dataclass(eq=False)
class MlpParams:
    """Feed-forward composite map: layers of (w, b, activation)."""

    layers: list  # of (w: (N_l, N_{l-1}), b: (N_l, 1), activation: str)

    def __post_init__(self):
        prev = None
        for w, b, act in self.layers:
            if act not in ("tanh", "sigmoid", "identity"):
                raise ContractError(f"unknown activation {act!r}")
            if b.shape != (w.shape[0], 1):
                raise ContractError(f"bias shape {b.shape} != {(w.shape[0], 1)}")
            if prev is not None and w.shape[1] != prev:
                raise ContractError(f"layer dims do not chain: {w.shape[1]} != {prev}")
            prev = w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @classmethod
    def init(cls, rng, sizes: list[int], activations: list[str]) -> "MlpParams":
        if len(activations) != len(sizes) - 1:
            raise ContractError("need one activation per layer")
        layers = []
        for d_in, d_out, act in zip(sizes[:-1], sizes[1:], activations):
            layers.append((uniform_init(rng, d_out, d_in, d_in), np.zeros((d_out, 1)), act))
        return cls(layers=layers)

    def named_arrays(self, prefix: str = "") -> dict:
        out = {}
        for i, (w, b, _) in enumerate(self.layers):
            out[f"{prefix}l{i}.w"] = w
            out[f"{prefix}l{i}.b"] = b
        return out


@dataclass(eq=False)
class EncoderDecoder:
    """Stacked-LSTM encoder and decoder with a linear output head.

    The latent vector concatenates the final (h, u) of every encoder layer,
    so its dimension is fixed at 2 * hidden * n_layers for any trip length.
    The decoder is seeded from that latent and rolls forward autonomously.
    With reverse_input the encoder consumes the trip back-to-front, so the
    latent is freshest about the trip's beginning, which the decoder emits
    first.
    """

    enc: list  # of LstmCellParams
    dec: list  # of LstmCellParams
    w_out: np.ndarray  # (1, H)
    b_out: np.ndarray  # (1, 1)
    v_max: float = 40.0
    reverse_input: bool = True

    @property
    def hidden(self) -> int:
        return self.enc[0].hidden

    @property
    def latent_dim(self) -> int:
        return 2 * self.hidden * len(self.enc)

    @property
    def enc_input_dim(self) -> int:
        return self.enc[0].input_dim

    @property
    def dec_input_dim(self) -> int:
        return self.dec[0].input_dim

    @classmethod
    def init(
        cls,
        rng,
        hidden: int,
        n_layers: int,
        enc_input_dim: int = 1,
        dec_input_dim: int = 1,
        v_max: float = 40.0,
        reverse_input: bool = True,
    ) -> "EncoderDecoder":
        enc = [
            LstmCellParams.init(rng, hidden, enc_input_dim if i == 0 else hidden)
            for i in range(n_layers)
        ]
        dec = [
            LstmCellParams.init(rng, hidden, dec_input_dim if i == 0 else hidden)
            for i in range(n_layers)
        ]
        return cls(
            enc=enc,
            dec=dec,
            w_out=uniform_init(rng, 1, hidden, hidden),
            b_out=np.zeros((1, 1)),
            v_max=v_max,
            reverse_input=reverse_input,
        )

    def named_arrays(self) -> dict:
        out = {}
        for i, cell in enumerate(self.enc):
            out.update(cell.named_arrays(f"enc{i}."))
        for i, cell in enumerate(self.dec):
            out.update(cell.named_arrays(f"dec{i}."))
        out["out.w"] = self.w_out
        out["out.b"] = self.b_out
        return out

    def replace_arrays(self, arrays: dict) -> "EncoderDecoder":
        """Rebuild the bundle from a flat name->array map (new snapshot)."""

        def cell(prefix):
            return LstmCellParams(
                w_sf=arrays[f"{prefix}w_sf"], w_si=arrays[f"{prefix}w_si"],
                w_so=arrays[f"{prefix}w_so"], w_gs=arrays[f"{prefix}w_gs"],
                w_hf=arrays[f"{prefix}w_hf"], w_hi=arrays[f"{prefix}w_hi"],
                w_ho=arrays[f"{prefix}w_ho"], w_gh=arrays[f"{prefix}w_gh"],
                b_f=arrays[f"{prefix}b_f"], b_i=arrays[f"{prefix}b_i"],
                b_o=arrays[f"{prefix}b_o"], b_c=arrays[f"{prefix}b_c"],
            )

        return EncoderDecoder(
            enc=[cell(f"enc{i}.") for i in range(len(self.enc))],
            dec=[cell(f"dec{i}.") for i in range(len(self.dec))],
            w_out=arrays["out.w"],
            b_out=arrays["out.b"],
            v_max=self.v_max,
            reverse_input=self.reverse_input,
        )


def replace_mlp_arrays(mlp: MlpParams, arrays: dict, prefix: str = "") -> MlpParams:
    layers = [
        (arrays[f"{prefix}l{i}.w"], arrays[f"{prefix}l{i}.b"], act)
        for i, (_, _, act) in enumerate(mlp.layers)
    ]
    return MlpParams(layers=layers)


# ---------------------------------------------------------------------------
# tape-bound forward computation
# ---------------------------------------------------------------------------


class BoundRnnCell:
    def __init__(self, tape: Tape, params: RnnCellParams):
        self.tape = tape
        self.hh = tape.leaf(params.theta_hh)
        self.sh = tape.leaf(params.theta_sh)
        self.b = tape.leaf(params.b_h)

    def step(self, s: Tensor, h: Tensor) -> Tensor:
        tape = self.tape
        batch = s.shape[1]
        pre = tape.add(
            tape.add(tape.matmul(self.hh, h), tape.matmul(self.sh, s)),
            self.b if batch == 1 else tape.tile_cols(self.b, batch),
        )
        return tape.tanh(pre)


class BoundLstmCell:
    """One LSTM cell's leaves on a tape, with gate weights pre-concatenated.

    Concatenation happens on the tape, so gradients flow back to the
    individual gate matrices untouched; the fused matmul is purely a speed
    measure for long unrolls.
    """

    def __init__(self, tape: Tape, params: LstmCellParams, leaves: dict | None = None):
        self.tape = tape
        self.hidden = params.hidden
        if leaves is None:
            leaves = {k: tape.leaf(v) for k, v in params.named_arrays().items()}
        self.leaves = leaves
        self.ws = tape.concat_rows([leaves["w_sf"], leaves["w_si"], leaves["w_so"], leaves["w_gs"]])
        self.wh = tape.concat_rows([leaves["w_hf"], leaves["w_hi"], leaves["w_ho"], leaves["w_gh"]])
        self.b = tape.concat_rows([leaves["b_f"], leaves["b_i"], leaves["b_o"], leaves["b_c"]])

    def step(self, s: Tensor, h: Tensor, u: Tensor) -> tuple[Tensor, Tensor]:
        tape = self.tape
        hd = self.hidden
        batch = s.shape[1]
        z = tape.add(
            tape.add(tape.matmul(self.ws, s), tape.matmul(self.wh, h)),
            self.b if batch == 1 else tape.tile_cols(self.b, batch),
        )
        f = tape.sigmoid(tape.slice_rows(z, 0, hd))
        i = tape.sigmoid(tape.slice_rows(z, hd, 2 * hd))
        o = tape.sigmoid(tape.slice_rows(z, 2 * hd, 3 * hd))
        g = tape.tanh(tape.slice_rows(z, 3 * hd, 4 * hd))
        u_next = tape.add(tape.mul(f, u), tape.mul(i, g))
        h_next = tape.mul(o, tape.tanh(u_next))
        return h_next, u_next


class BoundLstmStack:
    def __init__(self, tape: Tape, cells: list, prefix: str = "", leaf_map: dict | None = None):
        self.tape = tape
        self.cells = []
        for i, c in enumerate(cells):
            sub = None
            if leaf_map is not None:
                sub = {k.split(".", 1)[1]: v for k, v in leaf_map.items()
                       if k.startswith(f"{prefix}{i}.")}
                sub = sub or None
            self.cells.append(BoundLstmCell(tape, c, leaves=sub))

    def initial_states(self, batch: int) -> list:
        zero = self.tape.constant(np.zeros((self.cells[0].hidden, batch)))
        return [(zero, zero) for _ in self.cells]

    def step(self, x: Tensor, states: list) -> tuple[Tensor, list]:
        inp = x
        new_states = []
        for cell, (h, u) in zip(self.cells, states):
            h2, u2 = cell.step(inp, h, u)
            new_states.append((h2, u2))
            inp = h2
        return inp, new_states


class BoundMlp:
    def __init__(self, tape: Tape, params: MlpParams, leaves: dict | None = None, prefix: str = ""):
        self.tape = tape
        self.acts = [act for _, _, act in params.layers]
        if leaves is None:
            self.ws = [tape.leaf(w) for w, _, _ in params.layers]
            self.bs = [tape.leaf(b) for _, b, _ in params.layers]
        else:
            self.ws = [leaves[f"{prefix}l{i}.w"] for i in range(len(params.layers))]
            self.bs = [leaves[f"{prefix}l{i}.b"] for i in range(len(params.layers))]

    def __call__(self, x: Tensor) -> Tensor:
        tape = self.tape
        out = x
        for w, b, act in zip(self.ws, self.bs, self.acts):
            batch = out.shape[1]
            out = tape.add(
                tape.matmul(w, out), b if batch == 1 else tape.tile_cols(b, batch)
            )
            if act == "tanh":
                out = tape.tanh(out)
            elif act == "sigmoid":
                out = tape.sigmoid(out)
        return out


# ---------------------------------------------------------------------------
# batched encoder / decoder passes
# ---------------------------------------------------------------------------


def encode_batch(
    tape: Tape,
    enc: BoundLstmStack,
    step_inputs: list,
    lengths,
) -> Tensor:
    """Run the encoder over padded step inputs and gather per-trip final states.

    step_inputs: list of T constants/tensors shaped (D, B).  lengths[b] gives
    the true length of column b; the latent for that column is the stacked
    (h, u) of all layers at step lengths[b] - 1.
    """
    lengths = np.asarray(lengths)
    batch = step_inputs[0].shape[1]
    hidden = enc.cells[0].hidden
    n_layers = len(enc.cells)

    ends = {}
    for b, n in enumerate(lengths):
        ends.setdefault(int(n) - 1, []).append(b)

    states = enc.initial_states(batch)
    acc = [None] * (2 * n_layers)
    for t, x in enumerate(step_inputs):
        xt = x if isinstance(x, Tensor) else tape.constant(x)
        _, states = enc.step(xt, states)
        if t in ends:
            mask = np.zeros((1, batch))
            mask[0, ends[t]] = 1.0
            mask_t = tape.constant(np.repeat(mask, hidden, axis=0))
            for li, (h, u) in enumerate(states):
                for k, part in ((2 * li, h), (2 * li + 1, u)):
                    picked = tape.mul(part, mask_t)
                    acc[k] = picked if acc[k] is None else tape.add(acc[k], picked)
    return tape.concat_rows(acc)


def split_latent(tape: Tape, phi: Tensor, hidden: int, n_layers: int) -> list:
    """Unpack a latent column block into per-layer (h, u) initial states."""
    states = []
    for li in range(n_layers):
        h = tape.slice_rows(phi, 2 * li * hidden, (2 * li + 1) * hidden)
        u = tape.slice_rows(phi, (2 * li + 1) * hidden, (2 * li + 2) * hidden)
        states.append((h, u))
    return states


def decode_batch(
    tape: Tape,
    dec: BoundLstmStack,
    w_out: Tensor,
    b_out: Tensor,
    phi: Tensor,
    n_steps: int,
    extra_inputs=None,
) -> list:
    """Autoregressive decode: h0 from phi, s0 = 0, optional extra channels.

    extra_inputs(t, s_prev) -> list of Tensors appended below the speed row
    at step t (used for the (d, L) channels and static conditions).  Returns
    the list of T output tensors, each (1, B), in normalized units.
    """
    hidden = dec.cells[0].hidden
    batch = phi.shape[1]
    states = split_latent(tape, phi, hidden, len(dec.cells))
    s_prev = tape.constant(np.zeros((1, batch)))
    outputs = []
    for t in range(n_steps):
        if extra_inputs is not None:
            x = tape.concat_rows([s_prev] + extra_inputs(t, s_prev))
        else:
            x = s_prev
        top, states = dec.step(x, states)
        y = tape.add(
            tape.matmul(w_out, top),
            b_out if batch == 1 else tape.tile_cols(b_out, batch),
        )
        outputs.append(y)
        s_prev = y
    return outputs


# ---------------------------------------------------------------------------
# value-level operations (single trip / single step)
# ---------------------------------------------------------------------------


def rnn_step(params: RnnCellParams, h_prev, s_t) -> np.ndarray:
    """h_t = tanh(theta_hh h_{t-1} + theta_sh s_t + b_h) as plain values."""
    tape = Tape()
    cell = BoundRnnCell(tape, params)
    out = cell.step(
        tape.constant(np.asarray(s_t, dtype=float).reshape(-1, 1)),
        tape.constant(np.asarray(h_prev, dtype=float).reshape(-1, 1)),
    )
    return out.values[:, 0]


def lstm_step(params: LstmCellParams, h_prev, u_prev, s_t) -> tuple[np.ndarray, np.ndarray]:
    """One application of the six gate equations as plain values."""
    tape = Tape()
    cell = BoundLstmCell(tape, params)
    h, u = cell.step(
        tape.constant(np.asarray(s_t, dtype=float).reshape(-1, 1)),
        tape.constant(np.asarray(h_prev, dtype=float).reshape(-1, 1)),
        tape.constant(np.asarray(u_prev, dtype=float).reshape(-1, 1)),
    )
    return h.values[:, 0], u.values[:, 0]


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Composite semi-affine map applied to a single column vector."""
    tape = Tape()
    mlp = BoundMlp(tape, params)
    out = mlp(tape.constant(np.asarray(x, dtype=float).reshape(-1, 1)))
    return out.values[:, 0]


def encode(ed: EncoderDecoder, trip) -> np.ndarray:
    """Latent of one speed trip: final stacked (h, u), any trip length."""
    speeds = np.asarray(trip, dtype=float).reshape(-1)
    if speeds.size < 1:
        raise ContractError("cannot encode an empty trip")
    if ed.enc_input_dim != 1:
        raise ContractError(
            f"encode() expects a univariate encoder, got input dim {ed.enc_input_dim}"
        )
    if ed.reverse_input:
        speeds = speeds[::-1]
    tape = Tape()
    enc = BoundLstmStack(tape, ed.enc)
    inputs = [np.array([[s / ed.v_max]]) for s in speeds]
    phi = encode_batch(tape, enc, inputs, [speeds.size])
    return phi.values[:, 0]


def decode(ed: EncoderDecoder, phi, n: int) -> np.ndarray:
    """Generate n physical speeds from a latent; clamped at zero."""
    if n < 1:
        raise ContractError(f"decode length must be >= 1, got {n}")
    if ed.dec_input_dim != 1:
        raise ContractError(
            f"decode() expects a univariate decoder, got input dim {ed.dec_input_dim}"
        )
    tape = Tape()
    dec = BoundLstmStack(tape, ed.dec)
    phi_t = tape.constant(np.asarray(phi, dtype=float).reshape(-1, 1))
    outs = decode_batch(
        tape, dec, tape.leaf(ed.w_out), tape.leaf(ed.b_out), phi_t, n
    )
    normalized = np.concatenate([o.values for o in outs], axis=0)[:, 0]
    return np.maximum(normalized * ed.v_max, 0.0)
