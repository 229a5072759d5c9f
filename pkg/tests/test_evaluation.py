import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ssbcodebook.array_geometry import ArrayGeometry, Codebook, dft_codebook
from ssbcodebook.channel import ScenarioConfig, generate_episodes
from ssbcodebook.evaluation import (EncoderPolicy, MetricsRow, beam_histogram, entropy_bits,
                                    even_odd_similarity, gap_recovery, moving_average,
                                    policy_mean_db, run_scenario, similarity_report, to_db,
                                    write_histogram_csv, write_report_csv, write_similarity_csv)
from ssbcodebook.initial_access import csit_svd_rsrp, rsrp_table
from ssbcodebook.observation import ObservationConfig, initial_observation
from ssbcodebook.ssb_encoder import EncoderConfig, build_model, forward_codebook

GEOM = ArrayGeometry(8, 8)
DFT = dft_codebook(GEOM)
OBS = ObservationConfig()
SCEN = ScenarioConfig()


@pytest.fixture(scope="module")
def episodes():
    return generate_episodes(SCEN, 4, seed=8)


@pytest.fixture(scope="module")
def model():
    return build_model(EncoderConfig(widths=(8, 8)), np.random.default_rng(0))


# --- small helpers --------------------------------------------------------------------

def test_to_db_floor():
    np.testing.assert_allclose(to_db(np.array([1.0, 10.0, 0.0])), [0.0, 10.0, -300.0])


@given(st.floats(-1e3, 1e3), st.integers(1, 50), st.integers(0, 200))
def test_moving_average_constant(c, window, n):
    np.testing.assert_allclose(moving_average(np.full(n, c), window), np.full(n, c), atol=1e-9)


@given(st.lists(st.floats(-1e3, 1e3), max_size=60))
def test_moving_average_window_one_is_identity(xs):
    np.testing.assert_allclose(moving_average(xs, 1), xs, atol=1e-9)


def test_moving_average_matches_loop():
    x = np.random.default_rng(0).standard_normal(100)
    expected = [np.mean(x[max(0, i - 19):i + 1]) for i in range(100)]
    np.testing.assert_allclose(moving_average(x, 20), expected, atol=1e-12)


def test_moving_average_alternating_converges():
    out = moving_average(np.tile([0.0, 20.0], 100), 20)
    np.testing.assert_allclose(out[19::2], 10.0)
    assert out.size == 200


def test_moving_average_edge_cases():
    assert moving_average([], 20).size == 0
    with pytest.raises(ValueError):
        moving_average([1.0], 0)


def test_moving_average_preserves_mean_of_stationary_series():
    x = np.random.default_rng(1).normal(5.0, 1.0, size=20_000)
    assert abs(moving_average(x, 20).mean() - x.mean()) / x.mean() < 1 / 20


def test_histogram_examples():
    np.testing.assert_array_equal(beam_histogram([0, 0, 0], 8), [1, 0, 0, 0, 0, 0, 0, 0])
    idx = np.random.default_rng(2).integers(0, 8, size=80_000)
    h = beam_histogram(idx, 8)
    assert h.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(h, 1 / 8, atol=3 * np.sqrt(1 / 8 * 7 / 8 / 80_000))
    with pytest.raises(ValueError):
        beam_histogram([0, 8], 8)
    with pytest.raises(ValueError):
        beam_histogram([-1], 8)
    assert not beam_histogram([], 8).any()


def test_entropy():
    assert entropy_bits(np.full(8, 1 / 8)) == pytest.approx(3.0)
    assert entropy_bits([1.0, 0, 0]) == 0.0


def test_similarity_report_examples(rng):
    q, _ = np.linalg.qr(rng.standard_normal((64, 8)) + 1j * rng.standard_normal((64, 8)))
    _, off = similarity_report(Codebook(q.T))
    assert off == pytest.approx(0.0, abs=1e-12)
    dup = Codebook(np.vstack([DFT.vectors[:3], DFT.vectors[:1]]), l_max=4)
    assert similarity_report(dup)[1] == pytest.approx(1.0)
    sim, off = similarity_report(DFT)
    assert sim.shape == (8, 8)
    assert even_odd_similarity(DFT) == pytest.approx(sim[0, 1])
    assert off == pytest.approx(even_odd_similarity(DFT))


def test_gap_recovery_examples():
    assert gap_recovery(-40.0, -40.0, -30.0) == 0.0
    assert gap_recovery(-40.0, -30.0, -30.0) == 1.0
    assert gap_recovery(-40.0, -35.0, -30.0) == pytest.approx(0.5)
    assert gap_recovery(-30.0, -35.0, -30.0) is None
    assert gap_recovery(-30.0, -35.0, -31.0) is None


# --- run_scenario -------------------------------------------------------------------------

def test_rows_cover_active_steps(episodes):
    rows = run_scenario(episodes, "dft", DFT)
    assert len(rows) == sum(int(np.any(ep.active[:, t])) for ep in episodes for t in range(20))
    assert [(r.episode, r.t) for r in rows] == sorted((r.episode, r.t) for r in rows)
    for r in rows:
        assert np.isfinite(r.mean_rsrp_db)
        assert len(r.beam_indices) == r.n_active
        assert all(0 <= b < 8 for b in r.beam_indices)


def test_dft_row_metric_is_linear_mean_of_best_beam(episodes):
    ep = episodes[0]
    row = run_scenario([ep], "dft", DFT)[3]
    h, g = ep.snapshot(row.t)
    table = rsrp_table(h, DFT, g)
    assert row.mean_rsrp_db == pytest.approx(10 * np.log10(table.max(axis=1).mean()), abs=1e-9)
    assert list(row.beam_indices) == table.argmax(axis=1).tolist()


def test_svd_rows(episodes):
    rows = run_scenario(episodes[:1], "svd", DFT)
    h, g = episodes[0].snapshot(rows[0].t)
    assert rows[0].mean_rsrp_db == pytest.approx(10 * np.log10(csit_svd_rsrp(h, g).mean()))
    assert rows[0].beam_indices == ()


def test_single_beam_codebook_always_index_zero(episodes):
    one = Codebook(DFT.vectors[:1], l_max=8)
    rows = run_scenario(episodes, "dft", DFT, codebook=one)
    assert all(set(r.beam_indices) == {0} for r in rows)


@pytest.mark.parametrize("policy", ["dft", "encoder"])
def test_no_bound_violations(episodes, model, policy):
    rows = run_scenario(episodes, policy, DFT, OBS, model=model)
    assert sum(r.bound_violations for r in rows) == 0


def test_svd_dominates_codebooks_on_average(episodes, model):
    svd = policy_mean_db(run_scenario(episodes, "svd", DFT))
    assert svd >= policy_mean_db(run_scenario(episodes, "dft", DFT))
    assert svd >= policy_mean_db(run_scenario(episodes, "encoder", DFT, OBS, model=model))


def test_runs_are_reproducible(episodes, model):
    for policy in ("dft", "encoder"):
        a = run_scenario(episodes, policy, DFT, OBS, model=model, noise_var=0.1, seed=3)
        b = run_scenario(episodes, policy, DFT, OBS, model=model, noise_var=0.1, seed=3)
        assert a == b


def test_noise_changes_decisions_not_metric_definition(episodes):
    clean = run_scenario(episodes, "dft", DFT)
    noisy = run_scenario(episodes, "dft", DFT, noise_var=10.0, seed=1)
    assert [r.beam_indices for r in clean] != [r.beam_indices for r in noisy]
    # the reported value is always a clean RSRP, so noise can only lose gain
    assert policy_mean_db(noisy) <= policy_mean_db(clean) + 1e-9


def test_encoder_policy_modes(episodes, model):
    enc = EncoderPolicy(model, DFT, OBS, mode="static")
    first = enc.initial_codebook()
    np.testing.assert_array_equal(first.vectors,
                                  forward_codebook(model, initial_observation(DFT, OBS), DFT).vectors)
    assert enc.initial_codebook() is first
    static = run_scenario(episodes, "encoder", DFT, OBS, model=model, inference="static")
    iterative = run_scenario(episodes, "encoder", DFT, OBS, model=model, inference="iterative")
    assert static[0] == iterative[0]
    assert len(static) == len(iterative)


def test_run_scenario_errors(episodes):
    with pytest.raises(ValueError):
        run_scenario(episodes, "oracle", DFT)
    with pytest.raises(ValueError):
        run_scenario(episodes, "encoder", DFT)


def test_policy_mean_of_nothing_is_nan():
    assert np.isnan(policy_mean_db([]))


# --- CSV writers -------------------------------------------------------------------------------

def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_report_csv(tmp_path):
    rows = [MetricsRow(0, 1, "dft", -30.5, 2, (0, 3)), MetricsRow(0, 1, "svd", -28.0, 2)]
    write_report_csv(tmp_path / "r.csv", rows)
    out = read_csv(tmp_path / "r.csv")
    assert out[0] == ["episode", "t", "policy", "mean_rsrp_db", "n_active", "beam_indices"]
    assert out[1] == ["0", "1", "dft", "-30.500000", "2", "[0, 3]"]
    assert json.loads(out[2][5]) == []


def test_histogram_and_similarity_csv(tmp_path):
    write_histogram_csv(tmp_path / "h.csv", {"dft": np.array([0.75, 0.25])})
    assert read_csv(tmp_path / "h.csv") == [["beam", "fraction", "policy"],
                                            ["0", "0.750000", "dft"], ["1", "0.250000", "dft"]]
    write_similarity_csv(tmp_path / "s.csv", {"enc": np.eye(2)})
    out = read_csv(tmp_path / "s.csv")
    assert out[0] == ["i", "j", "value", "policy"] and len(out) == 5
    assert out[2] == ["0", "1", "0.000000", "enc"]
