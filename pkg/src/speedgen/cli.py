"""Command-line front end: corpus synthesis, training, generation, evaluation.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command
resolves its parameters from defaults, then an optional JSON config file,
then explicit flags (flags win), and writes the fully-resolved configuration
next to its outputs so a run can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .aegan import AeGanSpeedGenerator, MAGIC
from .data import export_csv, ingest_csv, synth_corpus
from .errors import ContractError, DataError, SpeedgenError
from .evaluation import compare_corpora, export_density_csv
from .markov import MarkovSpeedGenerator
from .nflow import FlowEnsembleGenerator

NEURAL_MODELS = ("rnn1d", "rnn3d", "crnn")
TRAIN_MODELS = ("markov", "nf") + NEURAL_MODELS

DEFAULTS = {
    "synth": {
        "trips": 100,
        "length_min": 100,
        "length_max": 6330,
        "profile": "mixed",
        "seed": 0,
    },
    "train": {
        "seed": 0,
        "threads": 1,
        "v_max": 40.0,
        "bin_width": 0.5,
        "emission": "uniform",
        "min_bin_samples": 50,
        "flow_layers": 4,
        "epochs": 2000,
        "batch_size": 256,
        "learning_rate": None,
        "hidden": 24,
        "layers": None,
        "grad_clip": 5.0,
        "gen_loss": "nonsaturating",
        "disc_steps": 1,
        "gen_steps": 1,
        "checkpoint_every": 0,
    },
    "generate": {
        "count": 1,
        "length": None,
        "seed": 0,
        "start_speed": 0.0,
        "condition": None,
        "condition_length": None,
        "per": 10,
    },
    "evaluate": {
        "points": 30_000,
        "seed": 0,
        "v_max": 40.0,
    },
}

# paper-scale hyperparameters documented for reference; desk-scale defaults
# above keep runs in the minutes range
PAPER_SCALE = {"epochs": 25_000, "batch_size": 256, "learning_rate": 0.001}


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=None, help="global RNG seed")
    sub.add_argument("--threads", type=int, default=None, help="worker-thread cap")
    sub.add_argument("--config", type=Path, default=None, help="JSON config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speedgen",
        description="Vehicle speed trajectory generators: Markov table, per-bin "
        "normalizing flows, and LSTM AE/GAN hybrids.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="create a synthetic trip corpus CSV")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--trips", type=int, default=None)
    p.add_argument("--length-min", type=int, default=None)
    p.add_argument("--length-max", type=int, default=None)
    p.add_argument("--profile", default=None, choices=["urban", "highway", "mixed"])
    _add_common(p)

    p = subs.add_parser("train", help="fit a generator on a corpus CSV")
    p.add_argument("model", choices=TRAIN_MODELS)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--v-max", type=float, default=None)
    p.add_argument("--bin-width", type=float, default=None)
    p.add_argument("--emission", default=None, choices=["uniform", "midpoint"])
    p.add_argument("--min-bin-samples", type=int, default=None)
    p.add_argument("--flow-layers", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--gen-loss", default=None, choices=["nonsaturating", "minimax"])
    p.add_argument("--disc-steps", type=int, default=None)
    p.add_argument("--gen-steps", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    _add_common(p)

    p = subs.add_parser("generate", help="sample trips from a trained artifact")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--start-speed", type=float, default=None)
    p.add_argument("--condition", type=float, default=None)
    p.add_argument(
        "--condition-length",
        default=None,
        help="sweep spec LO..HI:stepS in meters, e.g. 1000..6000:step1000",
    )
    p.add_argument("--per", type=int, default=None, help="trips per swept condition")
    _add_common(p)

    p = subs.add_parser("evaluate", help="density comparison of two corpora")
    p.add_argument("--generated", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--v-max", type=float, default=None)
    _add_common(p)

    return parser


def resolve_options(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """defaults <- config file <- flags; unknown config keys are rejected."""
    command = args.command
    resolved = dict(DEFAULTS[command])
    resolved.setdefault("seed", 0)
    resolved.setdefault("threads", 1)
    if args.config is not None:
        if not args.config.exists():
            parser.error(f"config file not found: {args.config}")
        doc = json.loads(args.config.read_text())
        section = doc.get(command, doc) if isinstance(doc, dict) else None
        if not isinstance(section, dict):
            parser.error(f"config file must hold a JSON object: {args.config}")
        for key, value in section.items():
            if key not in resolved:
                parser.error(f"unknown config key {key!r} for command {command!r}")
            resolved[key] = value
    skip = {"command", "config", "func"}
    for key, value in vars(args).items():
        if key in skip or value is None:
            continue
        if key in resolved:
            resolved[key] = value
    return resolved


def write_resolved(resolved: dict, args: argparse.Namespace, target: Path) -> None:
    doc = {"command": args.command, "options": {}}
    for key, value in sorted(resolved.items()):
        doc["options"][key] = str(value) if isinstance(value, Path) else value
    for key in ("model", "corpus", "out", "out_dir", "generated", "reference"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = str(value)
    target.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _require_file(parser, path: Path, what: str) -> None:
    if not path.exists():
        parser.error(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, parser) -> int:
    opt = resolve_options(args, parser)
    corpus = synth_corpus(
        opt["trips"],
        (opt["length_min"], opt["length_max"]),
        seed=opt["seed"],
        profile=opt["profile"],
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    export_csv(corpus, args.out)
    write_resolved(opt, args, args.out.with_suffix(args.out.suffix + ".config.json"))
    print(f"wrote {corpus.stats.n_trips} trips ({corpus.stats.total_points} points) to {args.out}")
    return 0


def _history_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([repr(row[f]) if isinstance(row[f], float) else row[f] for f in fields])


def cmd_train(args, parser) -> int:
    opt = resolve_options(args, parser)
    _require_file(parser, args.corpus, "corpus")
    corpus = ingest_csv(args.corpus, v_max=opt["v_max"])
    out_dir = args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.model == "markov":
        gen = MarkovSpeedGenerator(
            bin_width=opt["bin_width"], v_max=opt["v_max"], emission=opt["emission"]
        ).fit(corpus)
        gen.save(out_dir / "markov.json")
        report = gen.occupancy_report()
        _history_csv(
            out_dir / "occupancy.csv",
            [{"metric": k, "value": float(v)} for k, v in sorted(report.items())],
            ["metric", "value"],
        )
        print(f"markov table: {report['empty_rows']} empty rows of {report['n_bins']}")
    elif args.model == "nf":
        lr = opt["learning_rate"] if opt["learning_rate"] is not None else 0.05
        gen = FlowEnsembleGenerator(
            bin_width=opt["bin_width"],
            v_max=opt["v_max"],
            n_layers=opt["flow_layers"],
            epochs=opt["epochs"],
            learning_rate=lr,
            min_bin_samples=opt["min_bin_samples"],
            seed=opt["seed"],
            n_jobs=opt["threads"],
        ).fit(corpus)
        gen.save(out_dir / "nf.json")
        rows = [
            {
                "bin": i,
                "n_samples": int(gen.bin_counts_[i]),
                "initial_ll": float(gen.models_[i].history_[0]) if gen.models_[i] else float("nan"),
                "final_ll": float(gen.models_[i].history_[-1]) if gen.models_[i] else float("nan"),
            }
            for i in range(gen.n_bins)
        ]
        _history_csv(out_dir / "loss_history.csv", rows, ["bin", "n_samples", "initial_ll", "final_ll"])
        print(f"trained flows for {gen.trained_bins_.size} of {gen.n_bins} bins")
    else:
        lr = opt["learning_rate"] if opt["learning_rate"] is not None else 0.001
        est = AeGanSpeedGenerator(
            variant=args.model,
            hidden_size=opt["hidden"],
            enc_dec_layers=opt["layers"],
            epochs=opt["epochs"],
            batch_size=opt["batch_size"],
            learning_rate=lr,
            seed=opt["seed"],
            disc_steps_per_gen_step=opt["disc_steps"],
            gen_steps=opt["gen_steps"],
            grad_clip=opt["grad_clip"],
            gen_loss=opt["gen_loss"],
            checkpoint_every=opt["checkpoint_every"],
            checkpoint_dir=out_dir if opt["checkpoint_every"] else None,
            v_max=opt["v_max"],
        )
        est.fit(corpus)
        est.save(out_dir / f"{args.model}.bin")
        _history_csv(
            out_dir / "loss_history.csv",
            est.history_,
            ["epoch", "ae_mse", "disc_loss", "gen_loss"],
        )
        print(
            f"trained {args.model} for {opt['epochs']} epochs; "
            f"final reconstruction mse {est.history_[-1]['ae_mse']:.4f} (m/s)^2"
        )
    write_resolved(opt, args, out_dir / "resolved_config.json")
    return 0


def _parse_condition_sweep(spec: str, parser) -> list[float]:
    try:
        span, _, step_part = spec.partition(":")
        lo_s, _, hi_s = span.partition("..")
        step = float(step_part.removeprefix("step")) if step_part else 1000.0
        lo, hi = float(lo_s), float(hi_s)
    except ValueError:
        parser.error(f"cannot parse condition sweep {spec!r}; expected LO..HI:stepS")
    if step <= 0 or hi < lo:
        parser.error(f"bad condition sweep {spec!r}")
    values = []
    v = lo
    while v <= hi + 1e-9:
        values.append(round(v, 9))
        v += step
    return values


def _detect_artifact(path: Path, parser):
    blob = path.open("rb").read(len(MAGIC))
    if blob == MAGIC:
        return "aegan"
    try:
        doc = json.loads(path.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError):
        parser.error(f"unrecognized model artifact: {path}")
    fmt = doc.get("format", "")
    if fmt == "markov-transition-table":
        return "markov"
    if fmt == "flow-ensemble":
        return "nf"
    parser.error(f"unrecognized model artifact format {fmt!r}: {path}")


def cmd_generate(args, parser) -> int:
    opt = resolve_options(args, parser)
    _require_file(parser, args.model, "model artifact")
    kind = _detect_artifact(args.model, parser)
    seed = opt["seed"]

    # build the request list: (condition or None, length or None) per trip
    requests: list[tuple[float | None, int | None]] = []
    if opt["condition_length"]:
        sweep = _parse_condition_sweep(str(opt["condition_length"]), parser)
        for c in sweep:
            requests += [(c, opt["length"])] * opt["per"]
    else:
        requests = [(opt["condition"], opt["length"])] * opt["count"]

    trips = []
    records = []
    if kind == "aegan":
        est = AeGanSpeedGenerator.from_file(args.model)
        model = est.model_
        if model.variant == "crnn" and any(c is None for c, _ in requests):
            parser.error("conditional model requires --condition or --condition-length")
        for i, (c, n) in enumerate(requests):
            if n is None:
                if c is not None and model.seconds_per_meter > 0:
                    n = max(2, int(round(model.seconds_per_meter * c)))
                else:
                    parser.error("--length is required for this model")
            child = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            trip = est.generate(n, seed=child, condition=c)
            trip.id = f"{model.variant}-{i:05d}"
            trip.t0 = float(i * 100_000)
            trips.append(trip)
            records.append({"trip_id": trip.id, "seed": child, "length": n, "condition": c})
    elif kind == "markov":
        gen = MarkovSpeedGenerator.load(args.model)
        for i, (c, n) in enumerate(requests):
            if n is None:
                parser.error("--length is required for markov artifacts")
            child = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            trip = gen.sample(n, s0=opt["start_speed"], seed=child)
            trip.id = f"markov-{i:05d}"
            trip.t0 = float(i * 100_000)
            trips.append(trip)
            records.append({"trip_id": trip.id, "seed": child, "length": n, "condition": None})
    else:
        gen = FlowEnsembleGenerator.load(args.model)
        for i, (c, n) in enumerate(requests):
            if n is None:
                parser.error("--length is required for nf artifacts")
            child = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            trip = gen.generate(max(n - 1, 1), seed=child)  # emits n speeds incl. leading 0
            trip.id = f"nfg-{i:05d}"
            trip.t0 = float(i * 100_000)
            trips.append(trip)
            records.append({"trip_id": trip.id, "seed": child, "length": n, "condition": None})

    from .data import Corpus

    args.out.parent.mkdir(parents=True, exist_ok=True)
    export_csv(Corpus(trips), args.out)
    seeds_path = args.out.with_suffix(args.out.suffix + ".seeds.csv")
    with seeds_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trip_id", "seed", "length", "condition"])
        for rec in records:
            writer.writerow(
                [rec["trip_id"], rec["seed"], rec["length"],
                 "" if rec["condition"] is None else repr(float(rec["condition"]))]
            )
    write_resolved(opt, args, args.out.with_suffix(args.out.suffix + ".config.json"))
    print(f"wrote {len(trips)} trips to {args.out}")
    return 0


def cmd_evaluate(args, parser) -> int:
    opt = resolve_options(args, parser)
    _require_file(parser, args.generated, "generated corpus")
    _require_file(parser, args.reference, "reference corpus")
    generated = ingest_csv(args.generated, v_max=opt["v_max"])
    reference = ingest_csv(args.reference, v_max=opt["v_max"])
    report, hists = compare_corpora(
        generated, reference, n_points=opt["points"], seed=opt["seed"], v_max=opt["v_max"]
    )
    out_dir = args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    for name, hist in hists.items():
        export_density_csv(hist, out_dir / f"density_{name}.csv")
    write_resolved(opt, args, out_dir / "resolved_config.json")
    print(
        f"speed TV {report.speed_tv:.4f}  W1 {report.speed_w1:.4f}  "
        f"accel TV {report.accel_tv:.4f}  W1 {report.accel_w1:.4f}"
    )
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "generate": cmd_generate,
        "evaluate": cmd_evaluate,
    }
    try:
        return handlers[args.command](args, parser)
    except (DataError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SpeedgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if getattr(exc, "checkpoint", None):
            print(f"last checkpoint: {exc.checkpoint}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
