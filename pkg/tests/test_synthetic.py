import numpy as np
import pytest

from multipar.data import load_jsonl
from multipar.synthetic import (
    MODES,
    ContingencySpec,
    attention_lag_score,
    generate,
    load_truth,
    preset,
    save_dataset,
    uniform_causal_baseline,
)
from multipar.tensor import ConfigError

ONE_EDGE = dict(P=3, influence_graph=[(0, 1)], class_rule={"strong": 3, "weak": 2, "none": 1},
                mode_probs={"strong": 1.0})


def test_deterministic_under_seed():
    a = generate(ContingencySpec(seed=4), 20)
    b = generate(ContingencySpec(seed=4), 20)
    for x, y in zip(a, b):
        assert np.array_equal(x.features, y.features) and np.array_equal(x.labels, y.labels)


def test_distinct_seeds_give_distinct_onsets():
    onsets = []
    for seed in range(100):
        _, truth = generate(ContingencySpec(seed=seed), 5, return_truth=True)
        onsets.append(tuple(p["own_onset"] for t in truth for p in t["persons"]))
    assert len(set(onsets)) == 100


def test_zero_gain_zero_noise_leaves_pure_baseline():
    spec = ContingencySpec(**ONE_EDGE, noise_sigma=0.0, response_gain=0.0)
    for w in generate(spec, 10):
        assert (w.features[1] == 0).all() and (w.features[2] == 0).all()
        np.testing.assert_array_equal(w.labels, [1, 3, 1])


def test_response_is_scaled_copy_after_lag():
    spec = ContingencySpec(**ONE_EDGE, noise_sigma=0.0, event_len=2)
    for w, t in zip(*generate(spec, 10, return_truth=True)):
        p1 = t["persons"][1]
        o, lag = p1["onset"], p1["lag"]
        assert 1 <= lag <= 3
        np.testing.assert_allclose(w.features[1, o + lag:o + lag + 2], w.features[0, o:o + 2], rtol=1e-14)
        # one event of unit RMS per feature
        np.testing.assert_allclose(np.sqrt(np.mean(w.features[0, o] ** 2)), 1.0, rtol=1e-12)


def test_unlinked_person_is_independent_of_source_onset():
    spec = ContingencySpec(**ONE_EDGE, noise_sigma=1.0)
    windows, truth = generate(spec, 3000, return_truth=True)
    onset0 = np.array([t["persons"][1]["onset"] for t in truth], dtype=float)
    peak2 = np.array([np.argmax((w.features[2] ** 2).sum(-1)) for w in windows], dtype=float)
    r = np.corrcoef(onset0, peak2)[0, 1]
    assert abs(r) < 0.06


def test_cross_correlation_peaks_at_planted_lag():
    spec = ContingencySpec(**ONE_EDGE, noise_sigma=0.01, lag_min=2, lag_max=4, k=24, event_len=2)
    for w, t in zip(*generate(spec, 30, return_truth=True)):
        src, tgt = w.features[0], w.features[1]
        xc = [np.sum(src[:spec.k - d] * tgt[d:]) for d in range(spec.k)]
        best = int(np.argmax(xc))
        assert spec.lag_min <= best <= spec.lag_max
        assert best == t["persons"][1]["lag"]


def test_modes_and_labels():
    _, truth = generate(ContingencySpec(seed=1), 50, return_truth=True)
    rule = ContingencySpec().class_rule
    for t in truth:
        for p in t["persons"]:
            assert p["strength"] == MODES[p["mode"]].strength
            assert p["mode"] in rule


def test_frozen_person_has_no_noise():
    spec = ContingencySpec(mode_probs={"frozen": 1.0}, noise_sigma=0.5)
    for w, t in zip(*generate(spec, 5, return_truth=True)):
        for p in t["persons"]:
            x = w.features[p["person"]]
            # only the person's own event remains
            o = p["own_onset"]
            assert (np.delete(x, range(o, o + spec.event_len), axis=0) == 0).all()


def test_imbalance_preset_matches_engagement_mix():
    windows = generate(preset("imbalance", seed=0), 4000)
    freq = np.bincount(np.concatenate([w.labels for w in windows]), minlength=4) / (4000 * 5)
    np.testing.assert_allclose(freq[::-1], [0.802, 0.183, 0.013, 0.002], atol=0.02)


def test_codebook_signs_are_balanced():
    spec = ContingencySpec(n_signatures=2, noise_sigma=0.0)
    windows, truth = generate(spec, 400, return_truth=True)
    signs = []
    for w, t in zip(windows, truth):
        o = t["persons"][0]["own_onset"]
        signs.append(np.sign(w.features[0, o, 0]))
    assert 0.4 < np.mean(np.array(signs) > 0) < 0.6


def test_strong_contingency_speaker_structure():
    spec = preset("strong_contingency", seed=5, noise_sigma=0.0)
    windows, truth = generate(spec, 200, return_truth=True)
    for w, t in zip(windows, truth):
        speakers = [p["person"] for p in t["persons"] if p["source"] is None]
        assert len(speakers) == 1
        s = speakers[0]
        assert w.labels[s] == 0
        assert all(p["source"] == s for p in t["persons"] if p["person"] != s)


def test_strong_contingency_answer_ratio_sets_the_class():
    spec = preset("strong_contingency", seed=6, noise_sigma=0.0)
    windows, truth = generate(spec, 200, return_truth=True)
    expect = {3: 1.0, 2: 0.5, 1: 0.25}
    for w, t in zip(windows, truth):
        s = next(p["person"] for p in t["persons"] if p["source"] is None)
        src = np.linalg.norm(w.features[s], axis=1).max()
        for p in t["persons"]:
            if p["person"] == s:
                continue
            # answer and speaker rows never overlap, so row norms compare directly
            ratio = np.linalg.norm(w.features[p["person"]], axis=1).max() / src
            assert ratio == pytest.approx(expect[int(w.labels[p["person"]])], rel=1e-12)


def test_strong_contingency_own_energy_overlaps_across_classes():
    # the 16x spread of event sizes swamps the 4x spread of answer ratios
    spec = preset("strong_contingency", seed=7, noise_sigma=0.0)
    windows = generate(spec, 600)
    energy = {c: [] for c in range(4)}
    for w in windows:
        for p in range(spec.P):
            energy[int(w.labels[p])].append(np.linalg.norm(w.features[p], axis=1).max())
    lo = max(min(v) for v in energy.values())
    hi = min(max(v) for v in energy.values())
    assert lo < hi


@pytest.mark.parametrize("bad", [
    dict(lag_min=0), dict(lag_min=3, lag_max=2), dict(lag_max=16), dict(influence_graph=[(0, 0)]),
    dict(influence_graph=[(0, 9)]), dict(influence_graph=[(0, 2), (1, 2)]), dict(influence_graph=[(0, 1)]),
    dict(mode_probs={"bogus": 1.0}), dict(influence_graph="speaker", class_rule={"strong": 3}),
    dict(influence_graph="speaker", class_rule={"bogus": 1, "none": 0}), dict(influence_graph="star"), dict(noise_sigma=-1.0), dict(event_len=20), dict(n_signatures=0),
])
def test_spec_validation(bad):
    with pytest.raises(ConfigError):
        ContingencySpec(**bad)


def test_spec_round_trip_and_unknown_key():
    spec = preset("strong_contingency", seed=3)
    assert ContingencySpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        ContingencySpec.from_dict({"nope": 1})
    with pytest.raises(ConfigError):
        preset("missing")
    with pytest.raises(ConfigError):
        generate(spec, 0)


# -- attention lag score --------------------------------------------------------


def _uniform_causal(k):
    return np.tril(np.ones((k, k))) / np.arange(1, k + 1)[:, None]


@pytest.mark.parametrize("onset, lag, width", [(0, 1, 3), (4, 2, 3), (7, 3, 2), (10, 5, 6)])
def test_uniform_weights_hit_the_closed_form(onset, lag, width):
    k = 16
    score = attention_lag_score(_uniform_causal(k), onset, lag, width)
    r0, r1 = onset + lag, min(onset + lag + width, k)
    c1 = min(onset + width, k)
    by_hand = np.mean([(min(c1, i + 1) - onset) / (i + 1) for i in range(r0, r1)])
    assert abs(score - by_hand) < 1e-12
    assert abs(score - uniform_causal_baseline(k, onset, lag, width)) < 1e-12


def test_diagonal_weights_score_zero_when_lag_clears_window():
    assert attention_lag_score(np.eye(12), 3, 3, 3) == 0.0
    assert attention_lag_score(np.eye(12), 3, 4, 3) == 0.0


def test_all_mass_in_window_scores_one():
    k, onset, lag, width = 12, 2, 3, 3
    w = np.zeros((k, k))
    w[:, 0] = 1.0
    for i in range(onset + lag, onset + lag + width):
        w[i] = 0.0
        w[i, onset:onset + width] = 1.0 / width
    assert attention_lag_score(w, onset, lag, width) == 1.0


def test_score_rejects_bad_input():
    with pytest.raises(ValueError):
        attention_lag_score(np.ones((3, 4)), 0, 1, 1)
    with pytest.raises(ValueError):
        attention_lag_score(np.eye(4), 2, 3, 1)


def test_saved_dataset_loads(tmp_path):
    data, truth = save_dataset(ContingencySpec(seed=2), 12, tmp_path)
    samples = load_jsonl(data)
    assert len(samples) == 12 and samples[0].features.shape == (5, 16, 16)
    assert len(load_truth(truth)) == 12


def test_codebook_is_shared_across_sample_seeds():
    a = ContingencySpec(n_signatures=1, codebook_sign=False, noise_sigma=0.0, seed=1)
    b = ContingencySpec(n_signatures=1, codebook_sign=False, noise_sigma=0.0, seed=2)
    c = ContingencySpec(n_signatures=1, codebook_sign=False, noise_sigma=0.0, seed=2, codebook_seed=9)
    dirs = []
    for spec in (a, b, c):
        w, t = generate(spec, 1, return_truth=True)
        o = t[0]["persons"][0]["own_onset"]
        v = w[0].features[0, o]
        dirs.append(v / np.linalg.norm(v))
    np.testing.assert_allclose(dirs[0], dirs[1], atol=1e-12)
    assert abs(dirs[0] @ dirs[2]) < 0.99
