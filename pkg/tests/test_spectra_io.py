import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specmatch.errors import (
    EmptySpectrum,
    FormatError,
    InvalidGrid,
    MalformedLine,
    NonFiniteInput,
    NonMonotonicGrid,
)
from specmatch.spectra_io import (
    AugmentPolicy,
    Dataset,
    Grid,
    RawSpectrum,
    Spectrum,
    apply_augmentation,
    augment,
    normalize_minmax,
    parse_rruff,
    read_cache,
    read_rruff,
    resample,
    serialize_rruff,
    synth_dataset,
    write_cache,
)


# -- parsing ---------------------------------------------------------------


def test_parse_minimal_file():
    raw = parse_rruff("##NAMES=Quartz\n100.0, 5.0\n101.0, 7.0\n##END=")
    assert len(raw) == 2
    assert raw.metadata == {"NAMES": "Quartz"}
    assert raw.points == [(100.0, 5.0), (101.0, 7.0)]


def test_parse_rejects_decreasing_wavenumbers():
    with pytest.raises(NonMonotonicGrid):
        parse_rruff("100.0, 5.0\n99.0, 6.0")


def test_parse_rejects_repeated_wavenumber():
    with pytest.raises(NonMonotonicGrid):
        parse_rruff("100.0, 5.0\n100.0, 6.0")


def test_parse_large_file_against_line_count_oracle():
    rng = np.random.default_rng(3)
    header = "##NAMES=Calcite\n##RRUFFID=R040070\n##LOCALITY=somewhere, far\n"
    w = np.cumsum(rng.uniform(0.5, 1.5, 1000)) + 100
    y = rng.uniform(0, 500, 1000)
    body = "".join(f"{a!r}, {b!r}\n" for a, b in zip(w.tolist(), y.tolist()))
    text = header + body + "##END=\n"
    raw = parse_rruff(text)
    # independent oracle: count lines by prefix
    lines = [ln for ln in text.split("\n") if ln]
    n_meta = sum(ln.startswith("##") and not ln.startswith("##END") for ln in lines)
    n_data = sum(not ln.startswith("##") for ln in lines)
    assert len(raw) == n_data == 1000
    assert len(raw.metadata) == n_meta == 3
    assert raw.metadata["LOCALITY"] == "somewhere, far"
    np.testing.assert_array_equal(raw.wavenumbers, w)
    np.testing.assert_array_equal(raw.intensities, y)


def test_parse_tolerates_crlf_blank_lines_and_whitespace():
    raw = parse_rruff("##NAMES=A  \r\n\r\n 1.0 ,  2.0 \r\n2.0,3.0\r\n\r\n##END=\r\n")
    assert raw.metadata["NAMES"] == "A"
    assert raw.points == [(1.0, 2.0), (2.0, 3.0)]


def test_parse_stops_at_end_marker():
    raw = parse_rruff("1, 1\n2, 2\n##END=\nnot data at all")
    assert len(raw) == 2


@pytest.mark.parametrize("line", ["1.0; 2.0", "1.0, 2.0, 3.0", "abc, 2", "1.0, nan", "1.0"])
def test_malformed_lines_report_line_number(line):
    with pytest.raises(MalformedLine) as exc:
        parse_rruff(f"##NAMES=X\n0.5, 1\n{line}\n3, 1")
    assert exc.value.line_no == 3


def test_too_few_points():
    with pytest.raises(EmptySpectrum):
        parse_rruff("##NAMES=X\n1.0, 2.0\n")
    with pytest.raises(EmptySpectrum):
        parse_rruff("")


def test_parse_accepts_file_objects(tmp_path):
    p = tmp_path / "a.txt"
    p.write_bytes(b"##NAMES=Y\r\n1,2\r\n3,4\r\n")
    assert read_rruff(p).metadata["NAMES"] == "Y"
    assert len(parse_rruff(io.BytesIO(p.read_bytes()))) == 2


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0.01, 100.0), min_size=2, max_size=40),
    st.data(),
    st.dictionaries(st.from_regex(r"[A-Z]{1,8}", fullmatch=True).filter(lambda k: k != "END"),
                    st.from_regex(r"[A-Za-z0-9 ,.()-]{0,20}", fullmatch=True).map(str.strip), max_size=4),
)
def test_round_trip_preserves_points_and_metadata(steps, data, meta):
    w = 50.0 + np.cumsum(steps)
    y = np.array(data.draw(st.lists(finite, min_size=len(w), max_size=len(w))))
    raw = RawSpectrum(w, y, meta)
    back = parse_rruff(serialize_rruff(raw))
    np.testing.assert_array_equal(back.wavenumbers, raw.wavenumbers)
    np.testing.assert_array_equal(back.intensities, raw.intensities)
    assert back.metadata == meta


# -- grids and resampling ---------------------------------------------------


def test_resample_midpoint():
    raw = RawSpectrum([0, 2], [0, 2])
    np.testing.assert_allclose(resample(raw, (0, 2, 3)), [0, 1, 2])


def test_resample_constant():
    raw = RawSpectrum([0, 1], [5, 5])
    np.testing.assert_array_equal(resample(raw, (0, 1, 4)), [5, 5, 5, 5])


def test_resample_piecewise_linear():
    raw = RawSpectrum([0, 1, 3], [0, 1, 0])
    np.testing.assert_allclose(resample(raw, (0, 3, 7)), [0, 0.5, 1, 0.75, 0.5, 0.25, 0], atol=1e-15)


def test_resample_clamps_outside_span():
    raw = RawSpectrum([10, 20], [1, 3])
    out = resample(raw, (0, 30, 4))
    np.testing.assert_allclose(out, [1, 1, 3, 3])


@pytest.mark.parametrize("grid", [(0, 1, 1), (1, 1, 5), (2, 1, 5)])
def test_invalid_grid(grid):
    with pytest.raises(InvalidGrid):
        resample(RawSpectrum([0, 1], [0, 1]), grid)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 10.0), min_size=2, max_size=12), st.data(), st.integers(2, 60))
def test_resample_exact_on_piecewise_linear_signals(steps, data, n):
    knots = np.concatenate([[0.0], np.cumsum(steps)])
    vals = np.array(data.draw(st.lists(st.floats(-100, 100), min_size=knots.size, max_size=knots.size)))
    raw = RawSpectrum(knots, vals)
    grid = Grid(knots[0], knots[-1], n)
    got = resample(raw, grid)
    # oracle: locate the bracketing segment by linear scan
    for x, g in zip(grid.points(), got):
        j = max(i for i in range(knots.size - 1) if knots[i] <= x) if x < knots[-1] else knots.size - 2
        t = (x - knots[j]) / (knots[j + 1] - knots[j])
        expect = vals[j] + t * (vals[j + 1] - vals[j])
        assert abs(g - expect) <= 1e-9 * (1 + abs(expect))


# -- normalization ---------------------------------------------------------


@pytest.mark.parametrize(
    "v, expect",
    [([2, 4, 6], [0, 0.5, 1]), ([7, 7, 7], [0, 0, 0]), ([-1, 0, 3], [0, 0.25, 1])],
)
def test_normalize_examples(v, expect):
    np.testing.assert_allclose(normalize_minmax(v), expect)


def test_normalize_rejects_non_finite():
    with pytest.raises(NonFiniteInput):
        normalize_minmax([1.0, np.inf])


@given(st.lists(finite, min_size=1, max_size=50))
def test_normalize_idempotent_and_bounded(v):
    a = normalize_minmax(v)
    np.testing.assert_allclose(normalize_minmax(a), a, atol=1e-12)
    if np.ptp(v) > 0:
        assert a.min() == 0 and a.max() == 1
    else:
        assert not a.any()


# -- augmentation ----------------------------------------------------------


def test_pure_shift_pads_with_zeros():
    np.testing.assert_array_equal(apply_augmentation([1, 2, 3, 4], shift=2), [0, 0, 1, 2])
    np.testing.assert_array_equal(apply_augmentation([1, 2, 3, 4], shift=-1), [2, 3, 4, 0])


def test_scaling_is_undone_by_renormalization():
    np.testing.assert_allclose(apply_augmentation([0, 0.5, 1], scale=0.5), [0, 0.5, 1])


def test_augment_deterministic_per_seed():
    s = synth_dataset(2, 1, rng_seed=4)[0]
    pol = AugmentPolicy(max_shift=4, noise_sigma=0.01)
    a, b = augment(s, pol, 11), augment(s, pol, 11)
    np.testing.assert_array_equal(a.intensities, b.intensities)
    assert a.class_id == s.class_id
    assert not np.array_equal(a.intensities, augment(s, pol, 12).intensities)


def test_zero_policy_is_identity():
    s = synth_dataset(2, 1, rng_seed=4)[1]
    out = augment(s, AugmentPolicy.off(), 5)
    np.testing.assert_array_equal(out.intensities, s.intensities)


def test_augment_output_is_normalized():
    s = synth_dataset(2, 1, rng_seed=4)[0]
    out = augment(s, AugmentPolicy(), 0).intensities
    assert out.min() == 0 and out.max() == 1


@pytest.mark.parametrize("kw", [{"max_shift": -1}, {"noise_sigma": -0.1}, {"scale_range": (0, 1)}, {"scale_range": (2, 1)}])
def test_policy_validation(kw):
    with pytest.raises(ValueError):
        AugmentPolicy(**kw)


# -- containers --------------------------------------------------------------


def test_spectrum_is_read_only_copy():
    v = np.array([0.0, 1.0, 0.5])
    s = Spectrum(v, 1, "a")
    v[0] = 9
    assert s.intensities[0] == 0
    with pytest.raises(ValueError):
        s.intensities[0] = 1


def test_spectrum_rejects_non_finite():
    with pytest.raises(NonFiniteInput):
        Spectrum([0, np.nan], 0, "x")


def test_dataset_class_index_consistent():
    ds = synth_dataset(4, 3, rng_seed=2)
    idx = ds.class_index
    assert sorted(idx) == sorted({s.class_id for s in ds})
    assert sorted(i for ix in idx.values() for i in ix) == list(range(len(ds)))
    for c, ix in idx.items():
        assert all(ds[i].class_id == c for i in ix)


def test_dataset_rejects_mixed_lengths():
    with pytest.raises(ValueError):
        Dataset([Spectrum([0, 1], 0, "a"), Spectrum([0, 1, 2], 0, "b")])


# -- synthetic data ------------------------------------------------------------


def test_synth_cardinality():
    ds = synth_dataset(2, 3, (3, 6), 3, rng_seed=1)
    assert len(ds) == 6 and ds.class_ids == [0, 1]


def test_synth_deterministic():
    a, b = synth_dataset(3, 2, rng_seed=9), synth_dataset(3, 2, rng_seed=9)
    np.testing.assert_array_equal(a.matrix(), b.matrix())
    assert a.sample_ids() == b.sample_ids()


def test_synth_no_sample_randomness_without_baseline_and_noise():
    ds = synth_dataset(3, 4, baseline_degree=None, noise=0.0, rng_seed=5)
    for ix in ds.class_index.values():
        for i in ix[1:]:
            np.testing.assert_array_equal(ds[i].intensities, ds[ix[0]].intensities)


def test_synth_degree_zero_baseline_is_removed_by_normalization():
    ds = synth_dataset(3, 4, baseline_degree=0, noise=0.0, rng_seed=5)
    for ix in ds.class_index.values():
        for i in ix[1:]:
            np.testing.assert_allclose(ds[i].intensities, ds[ix[0]].intensities, atol=1e-12)


def test_synth_spectra_are_normalized():
    x = synth_dataset(5, 2, rng_seed=0).matrix()
    np.testing.assert_array_equal(x.min(axis=1), 0)
    np.testing.assert_array_equal(x.max(axis=1), 1)


def test_synth_spikes_are_single_bins():
    clean = synth_dataset(4, 3, baseline_degree=None, noise=0.0, rng_seed=6).matrix()
    spiked = synth_dataset(4, 3, baseline_degree=None, noise=0.0, spike_rate=1.0, rng_seed=6).matrix()
    assert spiked.shape == clean.shape and not np.array_equal(spiked, clean)
    np.testing.assert_array_equal(spiked.max(axis=1), 1)
    # a spectrum whose spike rescaled it has one bin at 1 and everything else lower
    for y in spiked:
        if np.sum(y == 1.0) == 1 and np.sort(y)[-2] < 0.6:
            break
    else:
        pytest.fail("no spike dominated any spectrum")


@pytest.mark.parametrize("seed", range(3))
def test_synth_noise_free_classes_are_l2_separable(seed):
    ds = synth_dataset(8, 3, baseline_degree=None, noise=0.0, peak_jitter=1.0, rng_seed=seed)
    x, y = ds.matrix(), ds.labels()
    d = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    assert np.array_equal(y[d.argmin(1)], y)


# -- cache ---------------------------------------------------------------------


def test_cache_round_trip(tmp_path):
    ds = synth_dataset(3, 2, rng_seed=0, grid=(100.0, 200.0, 64))
    p = tmp_path / "d.spcd"
    write_cache(ds, p, {"seed": 1})
    back = read_cache(p)
    assert back.sample_ids() == ds.sample_ids()
    assert back.class_names == ds.class_names
    assert back.grid == ds.grid
    assert back.stamp == {"seed": 1}
    np.testing.assert_array_equal(back.matrix(), ds.matrix().astype(np.float32))
    raw = p.read_bytes()
    assert raw[:4] == b"SPCD"
    assert int.from_bytes(raw[4:8], "little") == 1


def test_cache_rejects_garbage(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(FormatError):
        read_cache(p)


def test_cache_is_byte_deterministic(tmp_path):
    ds = synth_dataset(2, 2, rng_seed=1, grid=(0.0, 1.0, 16))
    write_cache(ds, tmp_path / "a", {"k": 1})
    write_cache(ds, tmp_path / "b", {"k": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
