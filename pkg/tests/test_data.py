from collections import Counter

import numpy as np
import pytest

from emsdg.data import (BIAS_TERMS, CohortSpec, NoiseSpec, bias_field, default_suite,
                        generate_sample, load_cohort, make_cohort, sample_rng, save_cohort,
                        sphere_features, stack)
from emsdg.moments import compute_channel_stats, intervals_overlap, summarize_cohort_moments


def cohort_summary(spec):
    x, _ = stack(make_cohort(spec))
    (row,) = summarize_cohort_moments([compute_channel_stats(x)], [spec.name])
    return row


def test_noise_free_center_equals_contrast():
    spec = CohortSpec("clean", (1, 1, 1), noise=NoiseSpec("gaussian", 0.0), jitter=0)
    c = (spec.volume_size - 1) // 2
    for k in range(3):
        s = generate_sample(k, spec, np.random.default_rng(0))
        assert s.volume[0, c, c, c] == pytest.approx(spec.contrasts[k], abs=1e-7)
        assert s.volume[0, 0, 0, 0] == 0.0
        assert s.label == k


def test_sample_contract():
    spec = CohortSpec("t", (2, 2, 2), volume_size=16, noise=NoiseSpec("student_t", 0.1, 5.0),
                      warp=1.5, bias=(0.1, 0.05, -0.05))
    for s in make_cohort(spec):
        assert s.volume.shape == (1, 16, 16, 16) and s.volume.dtype == np.float32
        assert np.isfinite(s.volume).all()
        assert s.volume.min() >= 0 and s.volume.max() <= 1
        assert s.cohort == "t"


def test_counts_and_ids():
    samples = make_cohort(CohortSpec("c", (10, 5, 5), volume_size=8))
    assert len(samples) == 20
    assert Counter(s.label for s in samples) == {0: 10, 1: 5, 2: 5}
    assert len({s.id for s in samples}) == 20
    assert samples[0].id == "c-c0-0000"


def test_determinism_and_seed_dependence():
    spec = CohortSpec("d", (3, 3, 3), volume_size=8, seed=4)
    a, b = make_cohort(spec), make_cohort(spec)
    assert all(np.array_equal(u.volume, v.volume) for u, v in zip(a, b))
    spec.seed = 5
    c = make_cohort(spec)
    assert not all(np.array_equal(u.volume, v.volume) for u, v in zip(a, c))


def test_per_sample_streams_match_cohort_generation():
    spec = CohortSpec("p", (2, 2, 2), volume_size=8, seed=9)
    cohort = make_cohort(spec)
    s = cohort[3]
    alone = generate_sample(s.label, spec, sample_rng(spec, s.id), s.id)
    assert np.array_equal(alone.volume, s.volume)


def test_spec_validation():
    with pytest.raises(ValueError, match="nu > 4"):
        NoiseSpec("student_t", 0.1, 3.0)
    with pytest.raises(ValueError, match="noise family"):
        NoiseSpec("poisson", 0.1)
    with pytest.raises(ValueError, match="strictly ordered"):
        CohortSpec("x", (1, 1, 1), radii=(6, 9, 7))
    with pytest.raises(ValueError, match="contrasts"):
        CohortSpec("x", (1, 1, 1), contrasts=(0.5, 0.0, 0.2))
    with pytest.raises(ValueError, match="gain and warp"):
        CohortSpec("x", (1, 1, 1), warp=0)
    with pytest.raises(ValueError, match="out of range"):
        generate_sample(3, CohortSpec("x", (1, 1, 1), volume_size=8), np.random.default_rng(0))


def test_spec_json_round_trip():
    spec = CohortSpec("j", (4, 3, 2), noise=NoiseSpec("lognormal", 0.05, 0.7), bias=(0.1, 0.2))
    back = CohortSpec.from_json(spec.to_json())
    assert back == spec
    assert len(back.bias) == len(BIAS_TERMS)


def test_bias_field_terms():
    spec = CohortSpec("b", (1, 1, 1), volume_size=5, bias=(0.5, 1.0))
    field = bias_field(spec)
    # u runs along the first axis from -1 to 1
    assert field[0, 2, 2] == pytest.approx(-0.5)
    assert field[4, 2, 2] == pytest.approx(1.5)


def test_class_signal_survives_every_default_cohort():
    src, targets = default_suite(source_counts=(20, 20, 20), target_counts=(20, 20, 20))
    for spec in [src] + targets:
        samples = make_cohort(spec)
        f = sphere_features(samples)
        y = np.asarray([s.label for s in samples])
        z = (f - f.mean(0)) / f.std(0)
        cents = np.stack([z[y == k].mean(0) for k in range(3)])
        pred = np.argmin(((z[:, None] - cents[None]) ** 2).sum(-1), axis=1)
        assert (pred == y).mean() > 0.9, spec.name


def test_default_suite_shape():
    src, targets = default_suite()
    assert src.name == "source" and src.n_per_class == (100, 50, 40)
    assert len(targets) == 3
    assert len({(t.noise.family, t.warp) for t in targets}) == 3
    assert len({t.seed for t in targets} | {src.seed}) == 4


def _pair(family_a, family_b, sd=0.2):
    # equal noise standard deviation, different family
    stds = {"gaussian": 1.0, "student_t": np.sqrt(5 / 3),
            "lognormal": np.sqrt((np.exp(0.81) - 1) * np.exp(0.81))}
    shapes = {"gaussian": 0.0, "student_t": 5.0, "lognormal": 0.9}
    return [cohort_summary(CohortSpec(f, (67, 67, 66), seed=5,
                                      noise=NoiseSpec(f, sd / stds[f], shapes[f])))
            for f in (family_a, family_b)]


def test_lognormal_noise_raises_skewness():
    g, ln = _pair("gaussian", "lognormal")
    assert ln.mean_skew > g.mean_skew
    assert not intervals_overlap(g.mean_skew, g.ci_skew, ln.mean_skew, ln.ci_skew)


def test_student_t_noise_raises_kurtosis():
    g, t = _pair("gaussian", "student_t")
    assert t.mean_kurt > g.mean_kurt
    assert not intervals_overlap(g.mean_kurt, g.ci_kurt, t.mean_kurt, t.ci_kurt)


def test_cache_round_trip(tmp_path):
    spec = CohortSpec("cache", (2, 1, 1), volume_size=8, noise=NoiseSpec("lognormal", 0.05, 0.5))
    samples = make_cohort(spec)
    path = tmp_path / "c.emvol"
    save_cohort(samples, spec, path)
    assert path.read_bytes().startswith(b"EMVOL v1\nspec {")
    back_spec, back = load_cohort(path)
    assert back_spec == spec
    assert [s.id for s in back] == [s.id for s in samples]
    assert all(np.array_equal(a.volume, b.volume) for a, b in zip(samples, back))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="volume bytes"):
        load_cohort(path)
