"""Hybrid LSTM autoencoder / GAN trajectory generators.

Three variants share one architecture: a stacked-LSTM encoder maps each trip
to a fixed-size latent, a stacked-LSTM decoder with a linear head rolls the
trip back out autonomously, and a feed-forward generator/discriminator pair
is trained adversarially on the latent vectors so that fresh latents can be
drawn from noise.

  rnn1d  univariate: encoder and decoder see speeds only.
  rnn3d  multivariate: (speed, distance-to-go, trip distance) channels; the
         decoder updates the distance channel from its own outputs.
  crnn   conditional: a static constraint (trip distance in meters) is
         concatenated to the generator noise, the discriminator input, and
         every decoder step.

Training alternates an autoencoder reconstruction step with discriminator
and generator steps each epoch, all driven by one seeded RNG stream.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .autodiff import AdamState, Tape, adam_step, clip_by_global_norm, paused_gc
from .data import Trip
from .errors import ContractError, DataError, DivergenceError
from .seqnets import (
    BoundLstmStack,
    BoundMlp,
    EncoderDecoder,
    MlpParams,
    decode_batch,
    encode_batch,
    replace_mlp_arrays,
)
from .validation import as_trips, check_speed_range

VARIANTS = ("rnn1d", "rnn3d", "crnn")
MAGIC = b"SPDGEN1\n"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    """Knobs of the joint AE/GAN training loop."""

    batch_size: int = 256
    learning_rate: float = 0.001
    epochs: int = 25_000
    hidden_size: int = 24
    enc_dec_layers: int | None = None  # None: 3 for rnn1d, 2 for rnn3d/crnn
    seed: int = 0
    disc_steps_per_gen_step: int = 1
    gen_steps: int = 1
    checkpoint_every: int = 0
    grad_clip: float = 5.0
    gen_loss: str = "nonsaturating"  # or "minimax"
    gan_hidden: int = 64
    gan_layers: int = 2
    eps_guard: float = 1e-7
    disc_lr_scale: float = 1.0  # discriminator lr = learning_rate * this

    def __post_init__(self):
        for name in ("batch_size", "learning_rate", "epochs", "hidden_size",
                     "gan_hidden", "gan_layers"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.enc_dec_layers is not None and self.enc_dec_layers < 1:
            raise ContractError("enc_dec_layers must be >= 1")
        if self.disc_steps_per_gen_step < 0 or self.gen_steps < 0:
            raise ContractError("step counts must be >= 0")
        if self.gen_loss not in ("nonsaturating", "minimax"):
            raise ContractError(f"gen_loss must be nonsaturating|minimax, got {self.gen_loss!r}")

    def layers_for(self, variant: str) -> int:
        if self.enc_dec_layers is not None:
            return self.enc_dec_layers
        return 3 if variant == "rnn1d" else 2


@dataclass(eq=False)
class AeGanModel:
    """Full parameter bundle for one trained (or fresh) generator."""

    variant: str
    encoder_decoder: EncoderDecoder
    generator: MlpParams
    discriminator: MlpParams
    condition_dim: int
    v_max: float
    d_scale: float = 1.0
    cond_lo: np.ndarray = field(default_factory=lambda: np.zeros(0))
    cond_hi: np.ndarray = field(default_factory=lambda: np.ones(0))
    train_distances: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seconds_per_meter: float = 0.0
    trained_epochs: int = 0

    @property
    def latent_dim(self) -> int:
        return self.encoder_decoder.latent_dim

    @property
    def noise_dim(self) -> int:
        # the noise vector lives in the latent space's dimension
        return self.latent_dim

    def normalize_condition(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=float).reshape(self.condition_dim, -1)
        span = np.maximum(self.cond_hi - self.cond_lo, 1e-12)
        return (c - self.cond_lo.reshape(-1, 1)) / span.reshape(-1, 1)


def init_model(
    variant: str,
    cfg: TrainConfig,
    v_max: float = 40.0,
    condition_dim: int | None = None,
) -> AeGanModel:
    """Fresh parameter bundle with seeded uniform initialization."""
    if variant not in VARIANTS:
        raise ContractError(f"variant must be one of {VARIANTS}, got {variant!r}")
    cond = condition_dim if condition_dim is not None else (1 if variant == "crnn" else 0)
    if variant != "crnn" and cond:
        raise ContractError(f"{variant} is unconditional; condition_dim must be 0")
    rng = np.random.default_rng(cfg.seed)
    layers = cfg.layers_for(variant)
    enc_dim = 3 if variant == "rnn3d" else 1
    dec_dim = 3 if variant == "rnn3d" else 1 + cond
    ed = EncoderDecoder.init(rng, cfg.hidden_size, layers, enc_dim, dec_dim, v_max=v_max)
    latent = ed.latent_dim
    gan_sizes = [cfg.gan_hidden] * cfg.gan_layers
    generator = MlpParams.init(
        rng, [latent + cond] + gan_sizes + [latent], ["tanh"] * cfg.gan_layers + ["identity"]
    )
    discriminator = MlpParams.init(
        rng, [latent + cond] + gan_sizes + [1], ["tanh"] * cfg.gan_layers + ["sigmoid"]
    )
    return AeGanModel(
        variant=variant,
        encoder_decoder=ed,
        generator=generator,
        discriminator=discriminator,
        condition_dim=cond,
        v_max=v_max,
    )


def augment_3d(trip, length_m: float, tol: float = 1e-6) -> np.ndarray:
    """Per-timestep (s_t, d_t, L) triples with d_t = L - sum_{i<=t} s_i."""
    speeds = np.asarray(getattr(trip, "speeds", trip), dtype=float).reshape(-1)
    csum = np.cumsum(speeds)
    d = length_m - csum
    if d[-1] < -tol:
        raise DataError(
            f"trip distance {csum[-1]:.3f} m exceeds declared length {length_m} m"
        )
    return np.column_stack([speeds, d, np.full(speeds.size, length_m)])


# ---------------------------------------------------------------------------
# batch preparation
# ---------------------------------------------------------------------------


class _CorpusTensors:
    """Padded per-corpus arrays in network units, built once per fit.

    Decoder targets stay in trip order; encoder channels are flipped per
    trip when the encoder reads back-to-front.
    """

    def __init__(self, trips, model: AeGanModel):
        check_speed_range(trips, model.v_max)
        self.lengths = np.array([len(t) for t in trips])
        if np.any(self.lengths < 2):
            raise ContractError("every training trip needs at least 2 samples")
        n, t_max = len(trips), int(self.lengths.max())
        reverse = model.encoder_decoder.reverse_input
        self.distances = np.array([float(np.sum(t.speeds)) for t in trips])
        self.speeds_norm = np.zeros((n, t_max))
        for i, trip in enumerate(trips):
            self.speeds_norm[i, : len(trip)] = trip.speeds / model.v_max
        self.mask = (np.arange(t_max)[None, :] < self.lengths[:, None]).astype(float)
        if model.variant == "rnn3d":
            self.channels = np.zeros((n, 3, t_max))
            for i, trip in enumerate(trips):
                feats = augment_3d(trip, self.distances[i])
                if reverse:
                    feats = feats[::-1]
                self.channels[i, 0, : len(trip)] = feats[:, 0] / model.v_max
                self.channels[i, 1, : len(trip)] = feats[:, 1] / model.d_scale
                self.channels[i, 2, : len(trip)] = feats[:, 2] / model.d_scale
        else:
            self.channels = np.zeros((n, 1, t_max))
            for i, trip in enumerate(trips):
                s = trip.speeds[::-1] if reverse else trip.speeds
                self.channels[i, 0, : len(trip)] = s / model.v_max
        if model.condition_dim:
            self.conditions = model.normalize_condition(self.distances)
        else:
            self.conditions = None


class _DistanceChannel:
    """Decoder-side (d, L) inputs updated from the decoder's own outputs."""

    def __init__(self, tape: Tape, length_norm: np.ndarray, speed_to_dist: float):
        self.tape = tape
        self.L = tape.constant(length_norm)
        self.d = self.L
        self.factor = tape.constant([[speed_to_dist]])

    def __call__(self, t: int, s_prev):
        if t > 0:
            self.d = self.tape.sub(self.d, self.tape.mul(s_prev, self.factor))
        return [self.d, self.L]


def _decoder_extras(tape, model, batch_rows, cond_rows):
    """Build the extra-channel callback for one decode pass, or None."""
    if model.variant == "rnn3d":
        channel = _DistanceChannel(
            tape, batch_rows.reshape(1, -1), model.v_max / model.d_scale
        )
        return channel
    if model.condition_dim:
        c_const = tape.constant(cond_rows)
        return lambda t, s_prev: [c_const]
    return None


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _reconstruction_loss_tape(model: AeGanModel, data: _CorpusTensors, idx):
    """Tape computing masked-mean squared error in normalized units."""
    tape = Tape()
    ed = model.encoder_decoder
    leaf_map = {k: tape.leaf(v) for k, v in ed.named_arrays().items()}
    enc = BoundLstmStack(tape, ed.enc, prefix="enc", leaf_map=leaf_map)
    dec = BoundLstmStack(tape, ed.dec, prefix="dec", leaf_map=leaf_map)
    lengths = data.lengths[idx]
    t_max = int(lengths.max())
    chans = np.ascontiguousarray(data.channels[idx, :, :t_max].transpose(2, 1, 0))
    inputs = [chans[t] for t in range(t_max)]
    phi = encode_batch(tape, enc, inputs, lengths)
    cond_rows = data.conditions[:, idx] if data.conditions is not None else None
    extras = _decoder_extras(tape, model, data.distances[idx] / model.d_scale, cond_rows)
    outs = decode_batch(
        tape, dec, leaf_map["out.w"], leaf_map["out.b"], phi, t_max, extras
    )
    pred = tape.concat_rows(outs)
    target = tape.constant(data.speeds_norm[idx, :t_max].T)
    mask = data.mask[idx, :t_max].T
    masked_sq = tape.mul(tape.square(tape.sub(pred, target)), tape.constant(mask))
    loss = tape.mul(tape.sum(masked_sq), tape.constant([[1.0 / mask.sum()]]))
    return tape, leaf_map, loss, phi


def ae_loss(model: AeGanModel, trips) -> float:
    """Mean squared reconstruction error in physical (m/s)^2 units."""
    trips = as_trips(trips)
    if not trips:
        raise ContractError("need a non-empty batch")
    data = _CorpusTensors(trips, model)
    _, _, loss, _ = _reconstruction_loss_tape(model, data, np.arange(len(trips)))
    return loss.item() * model.v_max**2


def _mlp_values(mlp: MlpParams, x: np.ndarray) -> np.ndarray:
    out = x
    for w, b, act in mlp.layers:
        out = w @ out + b
        if act == "tanh":
            out = np.tanh(out)
        elif act == "sigmoid":
            with np.errstate(over="ignore"):
                out = 1.0 / (1.0 + np.exp(-out))
    return out


def _stack_condition(x: np.ndarray, conditions: np.ndarray | None) -> np.ndarray:
    return x if conditions is None else np.concatenate([x, conditions], axis=0)


def gan_losses(
    model: AeGanModel,
    real_latents: np.ndarray,
    noise: np.ndarray,
    conditions: np.ndarray | None = None,
    gen_loss_form: str = "nonsaturating",
    eps: float = 1e-7,
) -> tuple[float, float]:
    """Cross-entropy discriminator loss and the chosen generator loss.

    disc = -1/2 E[log D(phi|c)] - 1/2 E[log(1 - D(G(z|c)))]
    gen  = -1/2 E[log D(G(z|c))]          (nonsaturating, default)
           +1/2 E[log(1 - D(G(z|c)))]     (minimax / zero-sum)
    """
    if real_latents.shape[1] != noise.shape[1]:
        raise ContractError("real and noise batches must have equal size")
    if (conditions is not None) != (model.condition_dim > 0):
        raise ContractError("conditions required iff the model is conditional")
    fake = _mlp_values(model.generator, _stack_condition(noise, conditions))
    d_real = _mlp_values(model.discriminator, _stack_condition(real_latents, conditions))
    d_fake = _mlp_values(model.discriminator, _stack_condition(fake, conditions))
    disc = float(
        -0.5 * np.mean(np.log(d_real + eps)) - 0.5 * np.mean(np.log(1.0 - d_fake + eps))
    )
    if gen_loss_form == "nonsaturating":
        gen = float(-0.5 * np.mean(np.log(d_fake + eps)))
    elif gen_loss_form == "minimax":
        gen = float(0.5 * np.mean(np.log(1.0 - d_fake + eps)))
    else:
        raise ContractError(f"unknown generator loss form {gen_loss_form!r}")
    return disc, gen


def _disc_step_tape(model, phi_real, fake, conditions, eps):
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in model.discriminator.named_arrays().items()}
    disc = BoundMlp(tape, model.discriminator, leaves=leaves)
    eps_t = tape.constant([[eps]])
    one = tape.constant([[1.0]])
    half = tape.constant([[0.5]])
    d_real = disc(tape.constant(_stack_condition(phi_real, conditions)))
    d_fake = disc(tape.constant(_stack_condition(fake, conditions)))
    loss = tape.neg(
        tape.add(
            tape.mul(half, tape.mean(tape.log(tape.add(d_real, eps_t)))),
            tape.mul(half, tape.mean(tape.log(tape.add(tape.sub(one, d_fake), eps_t)))),
        )
    )
    return tape, leaves, loss


def _gen_step_tape(model, noise, conditions, eps, form):
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in model.generator.named_arrays().items()}
    gen = BoundMlp(tape, model.generator, leaves=leaves)
    # discriminator weights enter as constants: gradients flow through its
    # input back to the generator only
    disc_consts = {
        k: tape.constant(v) for k, v in model.discriminator.named_arrays().items()
    }
    disc = BoundMlp(tape, model.discriminator, leaves=disc_consts)
    fake = gen(tape.constant(_stack_condition(noise, conditions)))
    if conditions is not None:
        fake = tape.concat_rows([fake, tape.constant(conditions)])
    d_fake = disc(fake)
    eps_t = tape.constant([[eps]])
    half = tape.constant([[0.5]])
    if form == "nonsaturating":
        loss = tape.neg(tape.mul(half, tape.mean(tape.log(tape.add(d_fake, eps_t)))))
    else:
        one = tape.constant([[1.0]])
        loss = tape.mul(
            half, tape.mean(tape.log(tape.add(tape.sub(one, d_fake), eps_t)))
        )
    return tape, leaves, loss


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train(
    model: AeGanModel,
    corpus,
    cfg: TrainConfig,
    checkpoint_dir=None,
) -> tuple[AeGanModel, list[dict]]:
    """Joint loop: one AE step, then discriminator/generator steps, per epoch.

    Deterministic for a given config seed.  Any non-finite loss aborts with a
    reference to the last checkpoint written.
    """
    trips = as_trips(corpus)
    if model.variant == "crnn" and model.condition_dim == 0:
        raise ContractError("crnn model must carry a positive condition_dim")
    if model.condition_dim and model.cond_lo.size == 0:
        dists = np.array([float(np.sum(t.speeds)) for t in trips])
        model = replace(model, cond_lo=np.array([dists.min()]), cond_hi=np.array([dists.max()]))
    data = _CorpusTensors(trips, model)
    rng = np.random.default_rng(cfg.seed)

    ed_params = model.encoder_decoder.named_arrays()
    gen_params = model.generator.named_arrays()
    disc_params = model.discriminator.named_arrays()
    ed_state = AdamState.for_params(ed_params)
    gen_state = AdamState.for_params(gen_params)
    disc_state = AdamState.for_params(disc_params)

    history: list[dict] = []
    last_checkpoint = None
    n_trips = len(trips)
    batch = min(cfg.batch_size, n_trips)

    def snapshot() -> AeGanModel:
        return replace(
            model,
            encoder_decoder=model.encoder_decoder.replace_arrays(ed_params),
            generator=replace_mlp_arrays(model.generator, gen_params),
            discriminator=replace_mlp_arrays(model.discriminator, disc_params),
        )

    def write_checkpoint(epoch):
        nonlocal last_checkpoint
        if checkpoint_dir is None:
            return
        path = Path(checkpoint_dir) / f"checkpoint_epoch{epoch:06d}.bin"
        snap = snapshot()
        snap.trained_epochs = epoch
        save_model(snap, path, cfg)
        last_checkpoint = path

    with paused_gc():
        for epoch in range(cfg.epochs):
            idx = np.sort(rng.choice(n_trips, size=batch, replace=False))

            # -- autoencoder step
            current = snapshot()
            tape, leaf_map, loss, phi = _reconstruction_loss_tape(current, data, idx)
            ae_mse_norm = loss.item()
            phi_values = phi.values
            grads = tape.gradients(loss)
            g = {k: grads[leaf_map[k]] for k in ed_params}
            if cfg.grad_clip > 0:
                g, _ = clip_by_global_norm(g, cfg.grad_clip)
            ed_params, ed_state = adam_step(ed_params, g, ed_state, lr=cfg.learning_rate)

            # -- adversarial steps on the (pre-update) encoded latents
            cond = data.conditions[:, idx] if data.conditions is not None else None
            disc_loss_val = math.nan
            gen_loss_val = math.nan
            for _ in range(cfg.gen_steps):
                for _ in range(cfg.disc_steps_per_gen_step):
                    z = rng.standard_normal((model.noise_dim, batch))
                    fake = _mlp_values(
                        replace_mlp_arrays(model.generator, gen_params),
                        _stack_condition(z, cond),
                    )
                    dm = snapshot()
                    tape_d, leaves_d, dloss = _disc_step_tape(
                        dm, phi_values, fake, cond, cfg.eps_guard
                    )
                    disc_loss_val = dloss.item()
                    grads_d = tape_d.gradients(dloss)
                    gd = {k: grads_d[leaves_d[k]] for k in disc_params}
                    disc_params, disc_state = adam_step(
                        disc_params, gd, disc_state,
                        lr=cfg.learning_rate * cfg.disc_lr_scale,
                    )
                z = rng.standard_normal((model.noise_dim, batch))
                gm = snapshot()
                tape_g, leaves_g, gloss = _gen_step_tape(
                    gm, z, cond, cfg.eps_guard, cfg.gen_loss
                )
                gen_loss_val = gloss.item()
                grads_g = tape_g.gradients(gloss)
                gg = {k: grads_g[leaves_g[k]] for k in gen_params}
                gen_params, gen_state = adam_step(
                    gen_params, gg, gen_state, lr=cfg.learning_rate
                )

            ae_mse = ae_mse_norm * model.v_max**2
            history.append(
                {
                    "epoch": epoch,
                    "ae_mse": ae_mse,
                    "disc_loss": disc_loss_val,
                    "gen_loss": gen_loss_val,
                }
            )
            bad = not math.isfinite(ae_mse) or (
                cfg.gen_steps > 0
                and cfg.disc_steps_per_gen_step > 0
                and not (math.isfinite(disc_loss_val) and math.isfinite(gen_loss_val))
            )
            if bad:
                write_checkpoint(epoch)
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} "
                    f"(ae={ae_mse}, disc={disc_loss_val}, gen={gen_loss_val})",
                    checkpoint=last_checkpoint,
                )
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                write_checkpoint(epoch + 1)

    trained = snapshot()
    trained.trained_epochs = model.trained_epochs + cfg.epochs
    trained.train_distances = data.distances.copy()
    # duration per meter via least squares through the origin
    denom = float(np.sum(data.distances**2))
    trained.seconds_per_meter = (
        float(np.sum(data.lengths * data.distances) / denom) if denom > 0 else 0.0
    )
    return trained, history


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def generate_batch(
    model: AeGanModel,
    lengths,
    seed: int | None = None,
    conditions=None,
) -> list[Trip]:
    """Draw one latent per requested trip and decode all of them in a batch.

    Per-trip noise comes from independent child seeds so a trip's content
    depends only on (seed, index, length, condition).
    """
    if model.trained_epochs == 0:
        raise ContractError("model has not been trained; call train()/fit() first")
    lengths = [int(n) for n in np.atleast_1d(lengths)]
    if any(n < 1 for n in lengths):
        raise ContractError("every requested length must be >= 1")
    batch = len(lengths)
    if model.condition_dim:
        if conditions is None:
            raise ContractError("conditional model needs a condition per trip")
        cond_phys = np.asarray(conditions, dtype=float).reshape(model.condition_dim, -1)
        if cond_phys.shape[1] == 1 and batch > 1:
            cond_phys = np.repeat(cond_phys, batch, axis=1)
        if cond_phys.shape[1] != batch:
            raise ContractError(f"{cond_phys.shape[1]} conditions for {batch} trips")
        cond = model.normalize_condition(cond_phys)
    else:
        if conditions is not None and model.variant != "rnn3d":
            raise ContractError(f"{model.variant} does not accept conditions")
        cond = None

    children = np.random.SeedSequence(seed).spawn(batch)
    z = np.column_stack(
        [np.random.default_rng(s).standard_normal(model.noise_dim) for s in children]
    )
    phi_hat = _mlp_values(model.generator, _stack_condition(z, cond))

    # rnn3d: the distance channel needs a target length; use the condition if
    # given, otherwise resample training distances
    if model.variant == "rnn3d":
        if conditions is not None:
            targets = np.asarray(conditions, dtype=float).reshape(-1)
            if targets.size == 1:
                targets = np.repeat(targets, batch)
        else:
            pool_rng = np.random.default_rng(np.random.SeedSequence(seed).generate_state(1)[0])
            targets = pool_rng.choice(model.train_distances, size=batch)
        dist_rows = targets / model.d_scale
    else:
        dist_rows = None

    tape = Tape()
    ed = model.encoder_decoder
    dec = BoundLstmStack(tape, ed.dec)
    extras = _decoder_extras(tape, model, dist_rows, cond)
    outs = decode_batch(
        tape,
        dec,
        tape.constant(ed.w_out),
        tape.constant(ed.b_out),
        tape.constant(phi_hat),
        max(lengths),
        extras,
    )
    speeds_norm = np.concatenate([o.values for o in outs], axis=0)
    speeds = np.maximum(speeds_norm * model.v_max, 0.0)
    trips = []
    for b, n in enumerate(lengths):
        trips.append(Trip(speeds=speeds[:n, b], id=f"{model.variant}-seed{seed}-{b:04d}"))
    return trips


def generate(model: AeGanModel, n: int, seed: int | None = None, condition=None) -> Trip:
    """One generated trip of n speeds (conditional variants require c)."""
    conditions = None if condition is None else np.asarray(condition, dtype=float)
    return generate_batch(model, [n], seed=seed, conditions=conditions)[0]


# ---------------------------------------------------------------------------
# persistence: magic + JSON header + raw little-endian float64 tensors
# ---------------------------------------------------------------------------


def _all_tensors(model: AeGanModel) -> dict:
    out = {f"ed.{k}": v for k, v in model.encoder_decoder.named_arrays().items()}
    out.update({f"gen.{k}": v for k, v in model.generator.named_arrays().items()})
    out.update({f"disc.{k}": v for k, v in model.discriminator.named_arrays().items()})
    out["meta.cond_lo"] = model.cond_lo.reshape(1, -1) if model.cond_lo.size else np.zeros((1, 0))
    out["meta.cond_hi"] = model.cond_hi.reshape(1, -1) if model.cond_hi.size else np.zeros((1, 0))
    out["meta.train_distances"] = model.train_distances.reshape(1, -1)
    return out


def save_model(model: AeGanModel, path, cfg: TrainConfig | None = None) -> None:
    tensors = _all_tensors(model)
    manifest = []
    offset = 0
    payload = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = arr.tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payload.append(raw)
        offset += len(raw)
    header = {
        "format": "aegan-model",
        "version": FORMAT_VERSION,
        "variant": model.variant,
        "v_max": model.v_max,
        "d_scale": model.d_scale,
        "condition_dim": model.condition_dim,
        "hidden": model.encoder_decoder.hidden,
        "n_layers": len(model.encoder_decoder.enc),
        "enc_input_dim": model.encoder_decoder.enc_input_dim,
        "dec_input_dim": model.encoder_decoder.dec_input_dim,
        "reverse_input": model.encoder_decoder.reverse_input,
        "gen_acts": [act for _, _, act in model.generator.layers],
        "gen_sizes": [model.generator.input_dim]
        + [w.shape[0] for w, _, _ in model.generator.layers],
        "disc_acts": [act for _, _, act in model.discriminator.layers],
        "disc_sizes": [model.discriminator.input_dim]
        + [w.shape[0] for w, _, _ in model.discriminator.layers],
        "seconds_per_meter": model.seconds_per_meter,
        "trained_epochs": model.trained_epochs,
        "config": asdict(cfg) if cfg is not None else None,
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in payload:
            fh.write(raw)


def load_model(path) -> tuple[AeGanModel, dict | None]:
    """Read a model container; returns (model, stored config dict or None)."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a model container (bad magic)")
    (head_len,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    head_start = len(MAGIC) + 8
    header = json.loads(blob[head_start : head_start + head_len].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported model version {header.get('version')}")
    base = head_start + head_len
    tensors = {}
    for spec in header["tensors"]:
        start = base + spec["offset"]
        arr = np.frombuffer(blob[start : start + spec["nbytes"]], dtype="<f8")
        tensors[spec["name"]] = arr.reshape(spec["shape"]).astype(np.float64)

    cfg_dict = header["config"] or {}
    skeleton_cfg = TrainConfig(
        hidden_size=header["hidden"],
        enc_dec_layers=header["n_layers"],
        gan_hidden=cfg_dict.get("gan_hidden", 64),
        gan_layers=cfg_dict.get("gan_layers", 2),
        seed=cfg_dict.get("seed", 0),
    )
    cond_dim = header["condition_dim"] if header["variant"] == "crnn" else None
    model = init_model(header["variant"], skeleton_cfg, v_max=header["v_max"], condition_dim=cond_dim)
    ed_arrays = {k[3:]: v for k, v in tensors.items() if k.startswith("ed.")}
    model.encoder_decoder.reverse_input = bool(header.get("reverse_input", True))
    model.encoder_decoder = model.encoder_decoder.replace_arrays(ed_arrays)
    model.generator = replace_mlp_arrays(
        model.generator, {k[4:]: v for k, v in tensors.items() if k.startswith("gen.")}
    )
    model.discriminator = replace_mlp_arrays(
        model.discriminator, {k[5:]: v for k, v in tensors.items() if k.startswith("disc.")}
    )
    model.d_scale = header["d_scale"]
    model.cond_lo = tensors["meta.cond_lo"].reshape(-1)
    model.cond_hi = tensors["meta.cond_hi"].reshape(-1)
    model.train_distances = tensors["meta.train_distances"].reshape(-1)
    model.seconds_per_meter = header["seconds_per_meter"]
    model.trained_epochs = header["trained_epochs"]
    return model, header["config"]


# ---------------------------------------------------------------------------
# estimator wrapper
# ---------------------------------------------------------------------------


class AeGanSpeedGenerator(BaseEstimator):
    """Scikit-learn-style front end over init_model / train / generate."""

    def __init__(
        self,
        variant: str = "rnn1d",
        hidden_size: int = 24,
        enc_dec_layers: int | None = None,
        epochs: int = 2000,
        batch_size: int = 256,
        learning_rate: float = 0.001,
        seed: int = 0,
        disc_steps_per_gen_step: int = 1,
        gen_steps: int = 1,
        grad_clip: float = 5.0,
        gen_loss: str = "nonsaturating",
        gan_hidden: int = 64,
        gan_layers: int = 2,
        disc_lr_scale: float = 1.0,
        checkpoint_every: int = 0,
        checkpoint_dir=None,
        v_max: float = 40.0,
    ):
        self.variant = variant
        self.hidden_size = hidden_size
        self.enc_dec_layers = enc_dec_layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.disc_steps_per_gen_step = disc_steps_per_gen_step
        self.gen_steps = gen_steps
        self.grad_clip = grad_clip
        self.gen_loss = gen_loss
        self.gan_hidden = gan_hidden
        self.gan_layers = gan_layers
        self.disc_lr_scale = disc_lr_scale
        self.checkpoint_every = checkpoint_every
        self.checkpoint_dir = checkpoint_dir
        self.v_max = v_max

    def _config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            hidden_size=self.hidden_size,
            enc_dec_layers=self.enc_dec_layers,
            seed=self.seed,
            disc_steps_per_gen_step=self.disc_steps_per_gen_step,
            gen_steps=self.gen_steps,
            checkpoint_every=self.checkpoint_every,
            grad_clip=self.grad_clip,
            gen_loss=self.gen_loss,
            gan_hidden=self.gan_hidden,
            gan_layers=self.gan_layers,
            disc_lr_scale=self.disc_lr_scale,
        )

    def fit(self, X, y=None) -> "AeGanSpeedGenerator":
        cfg = self._config()
        trips = as_trips(X)
        model = init_model(self.variant, cfg, v_max=self.v_max)
        distances = np.array([float(np.sum(t.speeds)) for t in trips])
        # start the decoder's output head at the corpus mean speed so early
        # epochs are not spent learning the offset
        mean_speed = float(np.mean(np.concatenate([t.speeds for t in trips])))
        model.encoder_decoder.b_out[0, 0] = mean_speed / self.v_max
        if model.variant == "rnn3d":
            model.d_scale = float(distances.max())
        if model.condition_dim:
            model.cond_lo = np.array([distances.min()])
            model.cond_hi = np.array([distances.max()])
        self.model_, self.history_ = train(
            model, trips, cfg, checkpoint_dir=self.checkpoint_dir
        )
        self.config_ = cfg
        return self

    def generate(self, n: int, seed: int | None = None, condition=None) -> Trip:
        check_is_fitted(self, "model_")
        return generate(self.model_, n, seed=seed, condition=condition)

    def generate_batch(self, lengths, seed: int | None = None, conditions=None) -> list[Trip]:
        check_is_fitted(self, "model_")
        return generate_batch(self.model_, lengths, seed=seed, conditions=conditions)

    def reconstruction_error(self, X) -> float:
        check_is_fitted(self, "model_")
        return ae_loss(self.model_, X)

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_model(self.model_, path, self.config_)

    @classmethod
    def from_file(cls, path) -> "AeGanSpeedGenerator":
        model, cfg = load_model(path)
        cfg = cfg or {}
        est = cls(
            variant=model.variant,
            hidden_size=model.encoder_decoder.hidden,
            enc_dec_layers=len(model.encoder_decoder.enc),
            epochs=cfg.get("epochs", 2000),
            batch_size=cfg.get("batch_size", 256),
            learning_rate=cfg.get("learning_rate", 0.001),
            seed=cfg.get("seed", 0),
            v_max=model.v_max,
        )
        est.model_ = model
        est.history_ = []
        est.config_ = TrainConfig(**cfg) if cfg else None
        return est
