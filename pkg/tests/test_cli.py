import json

import numpy as np
import pytest

from speedgen.cli import main
from speedgen.data import ingest_csv


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus_file(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus") / "corpus.csv"
    code = run(["synth", "--out", out, "--trips", 30, "--length-min", 100,
                "--length-max", 140, "--seed", 7])
    assert code == 0
    return out


def test_synth_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(["synth", "--out", a, "--trips", 12, "--seed", 5,
                "--length-min", 100, "--length-max", 120]) == 0
    assert run(["synth", "--out", b, "--trips", 12, "--seed", 5,
                "--length-min", 100, "--length-max", 120]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_synth_writes_resolved_config(tmp_path):
    out = tmp_path / "c.csv"
    assert run(["synth", "--out", out, "--trips", 3, "--seed", 1,
                "--length-min", 100, "--length-max", 110]) == 0
    doc = json.loads((tmp_path / "c.csv.config.json").read_text())
    assert doc["command"] == "synth"
    assert doc["options"]["trips"] == 3


def test_synth_invalid_profile_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run(["synth", "--out", tmp_path / "x.csv", "--profile", "rural"])
    assert exc.value.code == 2


def test_synth_default_length_bounds(tmp_path):
    out = tmp_path / "d.csv"
    assert run(["synth", "--out", out, "--trips", 2, "--seed", 3]) == 0
    doc = json.loads((tmp_path / "d.csv.config.json").read_text())
    assert doc["options"]["length_min"] == 100
    assert doc["options"]["length_max"] == 6330


def test_train_markov_and_generate(tmp_path, corpus_file):
    out_dir = tmp_path / "markov"
    assert run(["train", "markov", "--corpus", corpus_file, "--out-dir", out_dir]) == 0
    assert (out_dir / "markov.json").exists()
    assert (out_dir / "occupancy.csv").exists()
    assert (out_dir / "resolved_config.json").exists()

    trips_out = tmp_path / "markov_trips.csv"
    assert run(["generate", "--model", out_dir / "markov.json", "--out", trips_out,
                "--count", 4, "--length", 50, "--seed", 3]) == 0
    corpus = ingest_csv(trips_out)
    assert len(corpus) == 4
    assert all(len(t) == 50 for t in corpus)
    seeds = (tmp_path / "markov_trips.csv.seeds.csv").read_text().splitlines()
    assert seeds[0] == "trip_id,seed,length,condition"
    assert len(seeds) == 5


def test_train_missing_corpus_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run(["train", "markov", "--corpus", tmp_path / "nope.csv", "--out-dir", tmp_path])
    assert exc.value.code == 2


def test_train_nf_and_generate(tmp_path, corpus_file):
    out_dir = tmp_path / "nf"
    assert run(["train", "nf", "--corpus", corpus_file, "--out-dir", out_dir,
                "--epochs", 60, "--min-bin-samples", 25, "--seed", 1]) == 0
    assert (out_dir / "nf.json").exists()
    history = (out_dir / "loss_history.csv").read_text().splitlines()
    assert history[0] == "bin,n_samples,initial_ll,final_ll"

    trips_out = tmp_path / "nf_trips.csv"
    code = run(["generate", "--model", out_dir / "nf.json", "--out", trips_out,
                "--count", 2, "--length", 40, "--seed", 11])
    if code == 0:
        corpus = ingest_csv(trips_out)
        assert all(len(t) == 40 for t in corpus)
        assert all(t.speeds[0] == 0.0 for t in corpus)
    else:
        assert code == 1  # untrained reachable bin is a legal runtime failure


def test_train_rnn1d_history_and_roundtrip(tmp_path, corpus_file):
    out_dir = tmp_path / "rnn1d"
    args = ["train", "rnn1d", "--corpus", corpus_file, "--out-dir", out_dir,
            "--epochs", 8, "--hidden", 4, "--layers", 2, "--batch-size", 8,
            "--seed", 2]
    assert run(args) == 0
    history = (out_dir / "loss_history.csv").read_text().splitlines()
    assert history[0] == "epoch,ae_mse,disc_loss,gen_loss"
    assert len(history) == 9

    gen_out = tmp_path / "rnn_trips.csv"
    assert run(["generate", "--model", out_dir / "rnn1d.bin", "--out", gen_out,
                "--count", 3, "--length", 30, "--seed", 4]) == 0
    corpus = ingest_csv(gen_out)
    assert len(corpus) == 3


def test_train_config_file_flags_win(tmp_path, corpus_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"epochs": 5, "hidden": 4, "layers": 2,
                                         "batch_size": 8}}))
    out_dir = tmp_path / "cfgd"
    assert run(["train", "rnn1d", "--corpus", corpus_file, "--out-dir", out_dir,
                "--config", cfg, "--epochs", 3, "--seed", 1]) == 0
    doc = json.loads((out_dir / "resolved_config.json").read_text())
    assert doc["options"]["epochs"] == 3  # flag beats config file
    assert doc["options"]["hidden"] == 4  # config beats default


def test_unknown_config_key_exits_2(tmp_path, corpus_file):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"train": {"bogus_key": 1}}))
    with pytest.raises(SystemExit) as exc:
        run(["train", "markov", "--corpus", corpus_file,
             "--out-dir", tmp_path / "x", "--config", cfg])
    assert exc.value.code == 2


def test_generate_determinism_byte_identical(tmp_path, corpus_file):
    out_dir = tmp_path / "m"
    assert run(["train", "markov", "--corpus", corpus_file, "--out-dir", out_dir]) == 0
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert run(["generate", "--model", out_dir / "markov.json", "--out", out,
                    "--count", 5, "--length", 60, "--seed", 21]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_crnn_generate_requires_condition(tmp_path, corpus_file):
    out_dir = tmp_path / "crnn"
    assert run(["train", "crnn", "--corpus", corpus_file, "--out-dir", out_dir,
                "--epochs", 5, "--hidden", 4, "--layers", 2, "--batch-size", 8]) == 0
    with pytest.raises(SystemExit) as exc:
        run(["generate", "--model", out_dir / "crnn.bin",
             "--out", tmp_path / "t.csv", "--count", 1, "--length", 20])
    assert exc.value.code == 2


def test_crnn_condition_sweep_counts(tmp_path, corpus_file):
    out_dir = tmp_path / "crnn2"
    assert run(["train", "crnn", "--corpus", corpus_file, "--out-dir", out_dir,
                "--epochs", 5, "--hidden", 4, "--layers", 2, "--batch-size", 8]) == 0
    out = tmp_path / "sweep.csv"
    assert run(["generate", "--model", out_dir / "crnn.bin",
                "--out", out, "--condition-length", "500..1500:step500",
                "--per", 2, "--length", 25, "--seed", 5]) == 0
    corpus = ingest_csv(out)
    assert len(corpus) == 6  # 3 conditions x 2 trips


def test_evaluate_self_comparison(tmp_path, corpus_file):
    out_dir = tmp_path / "eval"
    assert run(["evaluate", "--generated", corpus_file, "--reference", corpus_file,
                "--out-dir", out_dir, "--points", 2000, "--seed", 0]) == 0
    report = json.loads((out_dir / "report.json").read_text())
    assert report["speed_tv"] < 0.1
    for name in ("generated_speed", "reference_speed", "generated_accel", "reference_accel"):
        assert (out_dir / f"density_{name}.csv").exists()


def test_evaluate_missing_reference_exits_2(tmp_path, corpus_file):
    with pytest.raises(SystemExit) as exc:
        run(["evaluate", "--generated", corpus_file,
             "--reference", tmp_path / "missing.csv", "--out-dir", tmp_path / "e"])
    assert exc.value.code == 2


def test_evaluate_deterministic(tmp_path, corpus_file):
    d1, d2 = tmp_path / "e1", tmp_path / "e2"
    for d in (d1, d2):
        assert run(["evaluate", "--generated", corpus_file, "--reference", corpus_file,
                    "--out-dir", d, "--points", 1500, "--seed", 9]) == 0
    assert (d1 / "report.json").read_bytes() == (d2 / "report.json").read_bytes()
