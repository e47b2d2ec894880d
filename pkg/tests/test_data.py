import dataclasses

import numpy as np
import pytest

from stormlatent.data import (
    REFERENCE_RAIN_PERCENT,
    DataError,
    GeneratorConfig,
    MultiSourceSample,
    Sequence,
    add_noise,
    bucket_distribution,
    channel_names,
    compute_stats,
    denormalize,
    generate_dataset,
    generate_sequence,
    importance_filter,
    normalize,
    normalize_intensity,
    read_split,
    sequence_seed,
    split_counts,
    write_dataset,
)

SMALL = GeneratorConfig(height=32, width=32, coarse_height=8, coarse_width=8, steps=12)


def _equal(a: Sequence, b: Sequence) -> bool:
    return (
        np.array_equal(a.qpe_radar, b.qpe_radar)
        and np.array_equal(a.reanalysis, b.reanalysis)
        and np.array_equal(a.satellite, b.satellite)
        and np.array_equal(a.time_index, b.time_index)
    )


def test_same_seed_is_bit_identical():
    assert _equal(generate_sequence(7, SMALL), generate_sequence(7, SMALL))
    assert not _equal(generate_sequence(7, SMALL), generate_sequence(8, SMALL))


def test_shapes_and_invariants():
    s = generate_sequence(3)
    assert s.qpe_radar.shape == (29, 4, 64, 64)
    assert s.reanalysis.shape == (29, 8, 16, 16)
    assert s.satellite.shape == (29, 3, 64, 64)
    assert np.all(s.target >= 0)
    assert all(np.all(np.isfinite(x)) for x in (s.qpe_radar, s.reanalysis, s.satellite))
    assert np.all(np.diff(s.time_index) == 1)
    names = channel_names(4)
    assert [len(v) for v in names.values()] == [4, 8, 3]


def test_no_satellite():
    s = generate_sequence(3, dataclasses.replace(SMALL, satellite=False))
    assert s.satellite is None and s.sample(0).satellite is None


def test_invalid_grid():
    with pytest.raises(DataError):
        generate_sequence(0, dataclasses.replace(SMALL, height=30))


def test_wet_fraction_near_reference():
    seqs = [generate_sequence(sequence_seed(0, i)) for i in range(100)]
    wet = 1.0 - bucket_distribution(seqs)[0]
    assert 0.02 <= wet <= 0.12
    assert REFERENCE_RAIN_PERCENT[0] == 93.31


def _centroid_x(field):
    w = field.sum()
    return (field.sum(axis=0) * np.arange(field.shape[1])).sum() / w


def test_eastward_advection():
    cfg = dataclasses.replace(
        SMALL, width=64, coarse_width=16, fixed_wind=(1.5, 0.0), decay=1.0, initial_blobs=((12.0, 16.0, 5.0, 2.5),)
    )
    rain = generate_sequence(0, cfg).target[:, 0]
    xs = [_centroid_x(f) for f in rain[:10]]
    for t, x in enumerate(xs):
        assert abs(x - (12.0 + 1.5 * t)) < 0.5


def test_temporal_coherence():
    s = generate_sequence(11)
    r = s.target[:, 0]
    step = np.mean(np.abs(np.diff(r, axis=0)))
    rng = np.random.default_rng(0)
    pairs = rng.integers(0, len(r), (200, 2))
    rand = np.mean([np.mean(np.abs(r[a] - r[b])) for a, b in pairs if a != b])
    assert step < rand


def test_dataset_split_protocol():
    splits = generate_dataset(1, 20, SMALL, sequences_per_month=10)
    assert [len(splits[k]) for k in ("train", "val", "test")] == [16, 2, 2]
    assert [s.metadata["index"] for s in splits["val"]] == [8, 18]
    assert split_counts(10) == (8, 1, 1) and split_counts(2) == (2, 0, 0)
    again = generate_dataset(1, 20, SMALL, sequences_per_month=10, workers=2)
    assert all(_equal(a, b) for a, b in zip(splits["train"], again["train"]))


def _tiny_seq(radar_level, rea_channel, sat=None):
    t = 1
    q = np.zeros((t, 2, 1, 2))
    q[0, 1, 0] = radar_level
    r = np.ones((t, 8, 1, 2)) * np.arange(8)[None, :, None, None] + np.array([0.0, 1.0])
    r[0, 0, 0] = rea_channel
    return Sequence(q, r, sat, np.arange(t))


def test_stats_two_pixel_channel():
    st = compute_stats([_tiny_seq([1.0, 3.0], [1.0, 3.0])])
    assert st.radar_mean[0] == 2.0 and st.radar_std[0] == 1.0
    assert st.reanalysis_mean[0] == 2.0 and st.reanalysis_std[0] == 1.0
    assert st.tau_norm == pytest.approx(0.003125)


def test_stats_zero_variance_names_channel():
    with pytest.raises(DataError, match=r"reanalysis\[0\]"):
        compute_stats([_tiny_seq([1.0, 3.0], [5.0, 5.0])])
    with pytest.raises(DataError):
        compute_stats([])


def test_normalize_examples_and_round_trip():
    splits = generate_dataset(2, 10, SMALL)
    st = compute_stats(splits["train"])
    assert normalize_intensity(0.0, st) == 0.0 and normalize_intensity(64.0, st) == 1.0
    sample = splits["val"][0].sample(3)
    back = denormalize(normalize(sample, st), st)
    assert np.max(np.abs(back.reanalysis - sample.reanalysis)) < 1e-9
    assert np.max(np.abs(back.qpe_radar - sample.qpe_radar)) < 1e-9
    assert np.max(np.abs(back.satellite - sample.satellite)) < 1e-9
    mean_field = MultiSourceSample(
        0,
        np.zeros_like(sample.qpe_radar) + np.r_[0.0, st.radar_mean][:, None, None],
        np.zeros_like(sample.reanalysis) + st.reanalysis_mean[:, None, None],
        np.zeros_like(sample.satellite) + st.satellite_mean[:, None, None],
        sample.target,
    )
    n = normalize(mean_field, st)
    assert np.allclose(n.reanalysis, 0.0) and np.allclose(n.satellite, 0.0) and np.allclose(n.qpe_radar, 0.0)


def test_noise_statistics():
    x = np.zeros((1000, 1000))
    s = MultiSourceSample(0, x[None], np.zeros((1, 1, 1)), None, np.ones((1, 2, 2)))
    noisy = add_noise(s, 0.02, 0)
    draws = noisy.qpe_radar
    assert abs(draws.std() - 0.02) < 0.0005
    assert abs(draws.mean()) < 3e-4
    assert np.array_equal(noisy.target, s.target)
    same = add_noise(s, 0.0, 0)
    assert np.array_equal(same.qpe_radar, s.qpe_radar)
    with pytest.raises(ValueError):
        add_noise(s, -0.1, 0)


def _seq(wet: bool) -> Sequence:
    q = np.zeros((2, 1, 2, 2))
    if wet:
        q[1, 0, 0, 0] = 1.0
    return Sequence(q, np.zeros((2, 8, 1, 1)), None, np.arange(2))


def test_importance_filter_counts():
    seqs = [_seq(i % 3 == 0 and i < 10) for i in range(10)]
    assert sum(s.target.max() > 0 for s in seqs) == 4
    kept = importance_filter(seqs, 0.5, seed=1)
    assert len(kept) == 7
    assert sum(s.target.max() > 0 for s in kept) == 4
    assert importance_filter(seqs, 1.0) == seqs
    assert importance_filter([_seq(False)] * 3, 0.0) == []
    with pytest.raises(ValueError):
        importance_filter(seqs, 1.5)


def test_bucket_examples():
    assert bucket_distribution(np.zeros(50))[0] == 1.0
    d = np.zeros(100)
    d[:3] = 1.5
    assert bucket_distribution(d)[2] == pytest.approx(0.03)
    assert bucket_distribution(np.array([0.2, 8.0, 8.1])).tolist() == pytest.approx([1 / 3, 0, 0, 0, 1 / 3, 1 / 3])


def test_disk_round_trip(tmp_path):
    splits = generate_dataset(4, 10, SMALL)
    write_dataset(tmp_path, splits)
    back = read_split(tmp_path, "train")
    assert len(back) == 8
    assert all(_equal(a, b) for a, b in zip(splits["train"], back))
    assert back[0].metadata["index"] == 0
    with pytest.raises(DataError):
        read_split(tmp_path, "nope")
