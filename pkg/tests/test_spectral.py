import numpy as np
import pytest

from bsnerf.spectral import (
    FILTER_NAMES,
    SpectralCurve,
    SpectralError,
    WavelengthGrid,
    build_response,
    default_filters,
    default_sensor,
    filter_values,
    gaussian,
    integrate_spectrum,
    load_curves,
    save_curves,
    sensor_values,
)


@pytest.fixture
def grid():
    return WavelengthGrid()


def flat(grid, value=1.0, name=""):
    return SpectralCurve(grid, np.full(grid.bins, value), name)


def one_hot(grid, b, name=""):
    v = np.zeros(grid.bins)
    v[b] = 1.0
    return SpectralCurve(grid, v, name)


def test_default_grid(grid):
    assert grid.bins == 24
    assert grid.delta == 10.0
    c = grid.centers
    assert c[0] == 435.0 and c[-1] == 665.0
    assert np.all(np.diff(c) > 0)
    assert grid.bins * grid.delta == grid.lambda_max - grid.lambda_min


def test_zero_filter_annihilates(grid):
    M = build_response([flat(grid, 0.0), flat(grid)], default_sensor(grid))
    assert np.all(M.weights[0] == 0)
    assert np.any(M.weights[1] > 0)


def test_flat_curves_give_bin_width(grid):
    M = build_response([flat(grid)], [flat(grid)])
    assert np.all(M.weights == 10.0)
    assert M.weights[0, 0].sum() == 240.0


def test_one_hot_filter_selects_bin(grid):
    M = build_response([one_hot(grid, 7)], [flat(grid)])
    expected = np.zeros(24)
    expected[7] = 10.0
    np.testing.assert_array_equal(M.weights[0, 0], expected)
    s = np.linspace(0.1, 0.9, 24)
    assert integrate_spectrum(s, 0, 0, M) == pytest.approx(10.0 * s[7], abs=1e-15)
    assert integrate_spectrum(np.zeros(24), 0, 0, M) == 0.0


def test_response_validation(grid):
    other = WavelengthGrid(400, 700, 30)
    with pytest.raises(SpectralError):
        build_response([flat(grid)], [flat(other)])
    with pytest.raises(SpectralError):
        SpectralCurve(grid, -np.ones(24))
    with pytest.raises(SpectralError):
        build_response([], [flat(grid)])
    M = build_response([flat(grid)], [flat(grid)])
    with pytest.raises(SpectralError):
        integrate_spectrum(np.ones(23), 0, 0, M)


def test_linearity_and_monotonicity(grid, rng):
    M = build_response(default_filters(grid), default_sensor(grid))
    for _ in range(20):
        s1, s2 = rng.uniform(0, 1, 24), rng.uniform(0, 1, 24)
        a, b = rng.normal(size=2)
        for d in range(M.views):
            for k in range(M.channels):
                lhs = integrate_spectrum(a * s1 + b * s2, d, k, M)
                rhs = a * integrate_spectrum(s1, d, k, M) + b * integrate_spectrum(s2, d, k, M)
                assert abs(lhs - rhs) < 1e-12
                bigger = s1 + rng.uniform(0, 0.1, 24)
                assert integrate_spectrum(bigger, d, k, M) >= integrate_spectrum(s1, d, k, M)


def test_flat_response_is_delta_times_sum(grid, rng):
    M = build_response([flat(grid)], [flat(grid)])
    s = rng.uniform(0, 1, 24)
    assert integrate_spectrum(s, 0, 0, M) == 10.0 * np.sum(s)


def test_coarse_grid_matches_fine_quadrature(rng):
    """24-bin sums against the same integral on a 240-bin grid."""
    coarse, fine = WavelengthGrid(bins=24), WavelengthGrid(bins=240)
    for _ in range(10):
        centers = rng.uniform(450, 650, 3)
        widths = rng.uniform(40, 80, 3)

        def curve(lam, i):
            return gaussian(lam, centers[i], widths[i])

        results = []
        for g in (coarse, fine):
            filt = SpectralCurve(g, 0.9 * curve(g.centers, 0))
            sens = SpectralCurve(g, curve(g.centers, 1))
            M = build_response([filt], [sens])
            results.append(integrate_spectrum(curve(g.centers, 2), 0, 0, M))
        # resampled curves take the interpolation path
        filt = SpectralCurve(coarse, 0.9 * curve(coarse.centers, 0)).resample(fine)
        sens = SpectralCurve(coarse, curve(coarse.centers, 1)).resample(fine)
        resampled = integrate_spectrum(curve(fine.centers, 2), 0, 0, build_response([filt], [sens]))
        assert abs(results[0] - results[1]) < 0.02 * results[1]
        assert abs(resampled - results[1]) < 0.02 * results[1]


def test_default_banks(grid):
    filters = default_filters(grid)
    assert [f.name for f in filters] == list(FILTER_NAMES)
    vals = np.stack([f.values for f in filters])
    assert np.all((vals >= 0) & (vals <= 1))
    assert np.all(vals.mean(axis=1) >= 0.2)
    for i in range(9):
        for j in range(i + 1, 9):
            assert np.max(np.abs(vals[i] - vals[j])) > 0.1
    sensor = default_sensor(grid)
    assert [s.name for s in sensor] == ["r", "g", "b"]
    peaks = [grid.centers[np.argmax(s.values)] for s in sensor]
    assert peaks[0] > peaks[1] > peaks[2]
    # analytic definitions are the ones the banks sample
    np.testing.assert_array_equal(vals, filter_values(grid.centers))
    np.testing.assert_array_equal(np.stack([s.values for s in sensor]), sensor_values(grid.centers))


def test_curve_file_round_trip(tmp_path, grid):
    filters = default_filters(grid)
    save_curves(tmp_path / "filters.csv", filters)
    loaded = load_curves(tmp_path / "filters.csv")
    assert len(loaded) == 9 and loaded[0].grid == grid
    for a, b in zip(filters, loaded):
        assert a.name == b.name
        np.testing.assert_array_equal(a.values, b.values)
    header = (tmp_path / "filters.csv").read_text().splitlines()[0]
    assert header.startswith("lambda_nm,Lavender,Orange")


def test_curve_file_errors(tmp_path, grid):
    p = tmp_path / "bad.csv"
    p.write_text("lambda_nm,a\n435,0.5\n445,1.2\n455,0.1\n")
    with pytest.raises(SpectralError, match=r"bad.csv:3"):
        load_curves(p)
    # sensitivities may exceed one
    assert load_curves(p, transmission=False)[0].values[1] == 1.2
    p.write_text("lambda_nm,a\n435,0.5\n425,0.2\n")
    with pytest.raises(SpectralError, match="increase"):
        load_curves(p)
    p.write_text("lambda_nm,a\n435,0.5\n445,x\n")
    with pytest.raises(SpectralError, match=r":3"):
        load_curves(p)
    p.write_text("wavelength,a\n435,0.5\n")
    with pytest.raises(SpectralError, match="header"):
        load_curves(p)
    p.write_text("lambda_nm,a\n435,0.5\n445,0.5\n700,0.5\n")
    with pytest.raises(SpectralError):
        load_curves(p)
    p.write_text("lambda_nm,a\n435,0.5\n445,0.5\n")
    with pytest.raises(SpectralError, match="outside"):
        load_curves(p, lambda_range=(430, 440))
