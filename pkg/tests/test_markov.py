import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speedgen.data import Trip, synth_corpus
from speedgen.errors import ContractError, DataError, GenerationError
from speedgen.markov import MarkovSpeedGenerator

from oracles import stationary_distribution, transition_counts_reference


def test_fit_constant_trip_self_loop():
    m = MarkovSpeedGenerator().fit([[5.0, 5.0, 5.0]])
    b = int(m.bin_of(5.0))
    assert m.probs_[b, b] == 1.0
    assert m.counts_[b, b] == 2


def test_fit_small_corpus_matches_hand_count():
    # bins of width 1 over [0, 4]: trip visits bins 0,1,2,1,0
    m = MarkovSpeedGenerator(bin_width=1.0, v_max=4.0).fit([[0.0, 1.0, 2.0, 1.0, 0.0]])
    assert m.counts_[0, 1] == 1
    assert m.counts_[1, 2] == 1
    assert m.counts_[2, 1] == 1
    assert m.counts_[1, 0] == 1
    np.testing.assert_allclose(m.probs_[1], [0.5, 0.0, 0.5, 0.0])


def test_fit_rows_sum_to_one():
    corpus = synth_corpus(20, (100, 200), seed=1)
    m = MarkovSpeedGenerator().fit(corpus)
    sums = m.probs_.sum(axis=1)
    filled = m.row_totals_ > 0
    np.testing.assert_allclose(sums[filled], 1.0, atol=1e-12)
    np.testing.assert_array_equal(sums[~filled], 0.0)


def test_fit_matches_bruteforce_recount():
    corpus = synth_corpus(15, (100, 180), seed=2)
    m = MarkovSpeedGenerator().fit(corpus)
    ref = transition_counts_reference([t.speeds for t in corpus], 0.5, 40.0)
    np.testing.assert_array_equal(m.counts_, ref)


def test_fit_order_invariant():
    corpus = synth_corpus(10, (100, 150), seed=3)
    m1 = MarkovSpeedGenerator().fit(list(corpus.trips))
    m2 = MarkovSpeedGenerator().fit(list(corpus.trips)[::-1])
    np.testing.assert_array_equal(m1.counts_, m2.counts_)


def test_fit_rejects_out_of_range():
    with pytest.raises(DataError, match="outside"):
        MarkovSpeedGenerator(v_max=40.0).fit([[0.0, 50.0]])


def test_sample_absorbing_self_loop():
    counts = np.eye(4, dtype=int) * 5
    m = MarkovSpeedGenerator.from_counts(counts, bin_width=10.0, v_max=40.0)
    trip = m.sample(20, s0=10.0, seed=0)
    np.testing.assert_array_equal(m.bin_of(trip.speeds), np.ones(20, dtype=int))


def test_sample_alternating_chain():
    counts = np.array([[0, 3], [3, 0]])
    m = MarkovSpeedGenerator.from_counts(counts, bin_width=1.0, v_max=2.0)
    trip = m.sample(4, s0=0.5, seed=1)
    np.testing.assert_array_equal(m.bin_of(trip.speeds), [0, 1, 0, 1])


def test_sample_deterministic_under_seed():
    m = MarkovSpeedGenerator().fit(synth_corpus(10, (100, 150), seed=4))
    a = m.sample(500, s0=0.0, seed=77)
    b = m.sample(500, s0=0.0, seed=77)
    np.testing.assert_array_equal(a.speeds, b.speeds)


def test_sample_empty_start_row_errors():
    counts = np.zeros((4, 4), dtype=int)
    counts[0, 0] = 1
    m = MarkovSpeedGenerator.from_counts(counts, bin_width=1.0, v_max=4.0)
    with pytest.raises(GenerationError):
        m.sample(5, s0=3.5, seed=0)


def test_sample_reaching_empty_row_carries_partial():
    # bin 0 always jumps to bin 1, which has no outgoing mass
    counts = np.array([[0, 2, 0], [0, 0, 0], [0, 0, 1]])
    m = MarkovSpeedGenerator.from_counts(counts, bin_width=1.0, v_max=3.0)
    with pytest.raises(GenerationError) as exc_info:
        m.sample(10, s0=0.0, seed=0)
    assert len(exc_info.value.partial) >= 1


def test_sample_row_frequencies_match_probs():
    m = MarkovSpeedGenerator().fit(synth_corpus(20, (100, 200), seed=5))
    row = int(np.argmax(m.row_totals_))
    n = 100_000
    rng_draws = m.probs_[row]
    rng = np.random.default_rng(123)
    samples = rng.choice(m.n_bins, size=n, p=rng_draws)
    # independent categorical draws agree with a chain restricted to one row
    empirical = np.bincount(samples, minlength=m.n_bins) / n
    assert np.max(np.abs(empirical - rng_draws)) < 0.01


def test_occupancy_fully_observed_two_bin_chain():
    counts = np.array([[1, 1], [1, 1]])
    m = MarkovSpeedGenerator.from_counts(counts, bin_width=1.0, v_max=2.0)
    report = m.occupancy_report()
    assert report["empty_rows"] == 0
    assert report["empty_cell_fraction"] == 0.0


def test_occupancy_low_speed_corpus_leaves_high_rows_empty():
    trips = [Trip(speeds=np.linspace(0, 9.4, 60))]
    m = MarkovSpeedGenerator(v_max=40.0).fit(trips)
    report = m.occupancy_report()
    high_rows = np.arange(m.bin_of(10.0), m.n_bins)
    assert np.all(m.row_totals_[high_rows] == 0)
    assert report["empty_rows"] >= high_rows.size


def test_occupancy_matches_bruteforce():
    corpus = synth_corpus(8, (100, 160), seed=6)
    m = MarkovSpeedGenerator().fit(corpus)
    ref = transition_counts_reference([t.speeds for t in corpus], 0.5, 40.0)
    report = m.occupancy_report()
    assert report["empty_rows"] == int(np.sum(ref.sum(axis=1) == 0))
    assert report["empty_cell_fraction"] == pytest.approx(float((ref == 0).mean()))


def test_midpoint_emission():
    counts = np.eye(2, dtype=int)
    m = MarkovSpeedGenerator.from_counts(counts, bin_width=2.0, v_max=4.0, emission="midpoint")
    trip = m.sample(5, s0=0.0, seed=0)
    np.testing.assert_array_equal(trip.speeds, np.full(5, 1.0))


def test_json_roundtrip():
    m = MarkovSpeedGenerator().fit(synth_corpus(5, (100, 140), seed=7))
    again = MarkovSpeedGenerator.from_json(m.to_json())
    np.testing.assert_array_equal(again.counts_, m.counts_)
    np.testing.assert_allclose(again.probs_, m.probs_)
    assert again.bin_width == m.bin_width and again.v_max == m.v_max


def test_stationary_distribution_recovered_on_toy_chain():
    rng = np.random.default_rng(8)
    counts = rng.integers(1, 40, size=(5, 5))
    m = MarkovSpeedGenerator.from_counts(counts, bin_width=1.0, v_max=5.0)
    pi = stationary_distribution(m.probs_)
    bins = m.sample_bins(200_000, b0=0, seed=9)
    empirical = np.bincount(bins, minlength=5) / bins.size
    tv = 0.5 * np.sum(np.abs(empirical - pi))
    assert tv < 0.01


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_property_row_stochastic_after_any_fit(seed):
    rng = np.random.default_rng(seed)
    trips = [rng.uniform(0, 39.9, size=rng.integers(2, 40)) for _ in range(3)]
    m = MarkovSpeedGenerator().fit(trips)
    sums = m.probs_.sum(axis=1)
    filled = m.row_totals_ > 0
    assert np.allclose(sums[filled], 1.0, atol=1e-12)
