"""Ion chains, bar targets, image formation and the detector model."""

import math

import numpy as np
import pytest
from scipy import optimize, stats

from ionoptics import constants as const
from ionoptics.diffraction import Frame, OpticalConfig
from ionoptics.errors import ConfigurationError, GeometryError, SamplingError
from ionoptics.scene import (CA40, DetectorModel, bar_target, chain_equilibrium, chain_scene, detect,
                             incoherent_image, length_scale_um, project_to_detector, species,
                             two_ion_distance, usaf_period_um)

OMEGA = 2 * math.pi * 333e3


def potential_si(z, sp=CA40, omega=OMEGA):
    """Axial potential energy in joules for positions z in metres."""
    k = sp.charge_c**2 / (4 * math.pi * const.VACUUM_PERMITTIVITY)
    trap = 0.5 * sp.mass_kg * omega**2 * np.sum(z**2)
    i, j = np.triu_indices(len(z), 1)
    return trap + k * np.sum(1.0 / np.abs(z[i] - z[j]))


def brute_force_positions(n, sp=CA40, omega=OMEGA):
    """Independent oracle: Nelder-Mead on the SI potential, in um."""
    scale = 1e-6
    x0 = np.linspace(-1, 1, n) * 4.0 * n
    e0 = potential_si(x0 * scale, sp, omega)
    res = optimize.minimize(lambda x: potential_si(x * scale, sp, omega) / e0, x0,
                            method="Nelder-Mead",
                            options=dict(xatol=1e-10, fatol=1e-16, maxiter=200000, maxfev=200000))
    return np.sort(res.x)


def test_calcium_mass():
    assert CA40.mass_u == pytest.approx(39.962590863 - 5.48579909065e-4, abs=1e-9)
    assert species("Ca40") == CA40
    with pytest.raises(ConfigurationError):
        species("Xx99")


def test_two_ion_distance_value():
    assert two_ion_distance(CA40, OMEGA) == pytest.approx(11.66, abs=0.01)


def test_two_ion_against_brute_force():
    x = brute_force_positions(2)
    assert x[1] - x[0] == pytest.approx(two_ion_distance(CA40, OMEGA), rel=1e-6)


def test_two_ion_closed_form_matches_solver():
    chain = chain_equilibrium(CA40, OMEGA, 2)
    assert chain.spacings_um[0] == pytest.approx(two_ion_distance(CA40, OMEGA), rel=1e-9)
    # d = 2^(1/3) l
    assert two_ion_distance(CA40, OMEGA) == pytest.approx(2 ** (1 / 3) * length_scale_um(CA40, OMEGA))


@pytest.mark.parametrize("n", [3, 4, 5])
def test_chain_against_brute_force(n):
    chain = chain_equilibrium(CA40, OMEGA, n)
    np.testing.assert_allclose(chain.positions_um, brute_force_positions(n), atol=1e-4)


def test_known_scaled_positions():
    # published dimensionless equilibrium positions for small crystals
    l = length_scale_um(CA40, OMEGA)
    np.testing.assert_allclose(chain_equilibrium(CA40, OMEGA, 3).positions_um / l,
                               [-1.0772, 0, 1.0772], atol=1e-4)
    np.testing.assert_allclose(chain_equilibrium(CA40, OMEGA, 4).positions_um / l,
                               [-1.4368, -0.4544, 0.4544, 1.4368], atol=1e-4)


@pytest.mark.parametrize("n", [2, 7, 12, 20])
def test_chain_is_converged_and_symmetric(n):
    chain = chain_equilibrium(CA40, OMEGA, n)
    assert chain.gradient_norm < 1e-12
    np.testing.assert_allclose(chain.positions_um, -chain.positions_um[::-1], atol=1e-12)
    assert np.all(chain.spacings_um > 0)
    # the crystal is densest at its center
    s = chain.spacings_um
    assert s[len(s) // 2] <= s[0]


def test_chain_scaling_with_frequency():
    a = chain_equilibrium(CA40, OMEGA, 5).positions_um
    b = chain_equilibrium(CA40, 2 * OMEGA, 5).positions_um
    np.testing.assert_allclose(b, a * 2 ** (-2 / 3), rtol=1e-10)


def test_single_ion_and_bounds():
    one = chain_equilibrium(CA40, OMEGA, 1)
    assert one.positions_um.tolist() == [0.0]
    assert one.to_json_dict()["spacings_um"] == []
    for bad in (0, 21):
        with pytest.raises(ConfigurationError):
            chain_equilibrium(CA40, OMEGA, bad)
    with pytest.raises(ConfigurationError):
        chain_equilibrium(CA40, -1.0, 3)


def test_chain_scene_places_ions():
    chain = chain_equilibrium(CA40, OMEGA, 3)
    scene = chain_scene(chain, 0.5, 60.0)
    assert scene.total == pytest.approx(3.0)
    c = scene.height // 2
    cols = np.arange(scene.width)
    row = scene.values[c]
    center = (row * cols).sum() / row.sum()
    assert center == pytest.approx(c, abs=1e-9)
    with pytest.raises(GeometryError):
        chain_scene(chain, 0.5, 20.0)


def test_usaf_period():
    assert usaf_period_um(7, 1) == pytest.approx(1e3 / 128)
    assert usaf_period_um(0, 1) == pytest.approx(1e3)
    assert 1e3 / usaf_period_um(7, 6) == pytest.approx(228.1, abs=0.1)
    with pytest.raises(ConfigurationError):
        usaf_period_um(7, 7)


def test_bar_target_geometry():
    obj = bar_target(8.0, 3, "vertical", 0.5, 80.0)
    # three bars of 4 x 20 um
    assert obj.total * 0.25 == pytest.approx(3 * 4.0 * 20.0)
    assert set(np.unique(obj.values)) <= {0.0, 1.0}
    cols = obj.values.sum(axis=0)
    assert np.count_nonzero(cols) == 3 * 8
    assert np.allclose(obj.values.T, bar_target(8.0, 3, "horizontal", 0.5, 80.0).values)


def test_bar_target_partial_coverage_conserves_area():
    obj = bar_target(7.3, 3, "vertical", 0.7, 80.0)
    assert obj.total * 0.49 == pytest.approx(3 * 3.65 * 18.25, rel=1e-12)


def test_bar_target_errors():
    with pytest.raises(SamplingError):
        bar_target(1.0, 3, "vertical", 0.5, 50.0)
    with pytest.raises(GeometryError):
        bar_target(20.0, 3, "vertical", 0.5, 30.0)


def _blob(n=41, sigma=2.0):
    x = np.arange(n) - n // 2
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def test_incoherent_image_full_conserves_flux_and_axis():
    obj = np.zeros((31, 31))
    obj[15, 15] = 2.0
    obj[15, 20] = 1.0
    psf = Frame(_blob(), 1.0, plane="image")
    img = incoherent_image(Frame(obj, 1.0), psf, "full")
    assert img.total == pytest.approx(3.0)
    c = img.height // 2
    assert img.values.shape[0] % 2 == 1
    assert np.unravel_index(np.argmax(img.values), img.values.shape) == (c, c)


def test_incoherent_image_same_and_delta():
    obj = Frame(np.random.default_rng(1).random((20, 24)), 0.5)
    delta = np.zeros((5, 5))
    delta[2, 2] = 1
    same = incoherent_image(obj, Frame(delta, 0.5, plane="image"), "same")
    np.testing.assert_allclose(same.values, obj.values, atol=1e-12)
    with pytest.raises(ConfigurationError):
        incoherent_image(obj, Frame(delta, 0.4, plane="image"))


def test_projection_conserves_energy():
    img = Frame(_blob(129, 6.0), 0.1, plane="image")
    det = project_to_detector(img, 0.37, shape=(31, 31))
    assert det.sum() == pytest.approx(1.0, rel=1e-6)


def test_detector_noise_is_poisson():
    img = Frame(np.full((64, 64), 1.0 / 4096), 1.0)
    cfg = OpticalConfig(magnification=1.0, detector_pixel_pitch_um=1.0)
    det = DetectorModel(pixel_pitch_um=1.0, flux=4096 * 50.0, seed=7, shape=(64, 64))
    frame = detect(img, cfg, det)
    counts = frame.values.ravel()
    assert np.all(counts == np.rint(counts))
    # Kolmogorov-Smirnov on the randomized PIT of a discrete Poisson(50)
    rng = np.random.default_rng(0)
    u = stats.poisson.cdf(counts - 1, 50) + rng.random(counts.size) * stats.poisson.pmf(counts, 50)
    assert stats.kstest(u, "uniform").pvalue > 1e-3


def test_detector_read_noise_and_determinism():
    img = Frame(np.full((32, 32), 1.0 / 1024), 1.0)
    cfg = OpticalConfig(magnification=1.0, detector_pixel_pitch_um=1.0)
    det = DetectorModel(pixel_pitch_um=1.0, flux=1024 * 100.0, read_noise=5.0, seed=3, shape=(32, 32))
    a, b = detect(img, cfg, det), detect(img, cfg, det)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.var(a.values) == pytest.approx(125.0, rel=0.2)


def test_detector_saturation_flag():
    img = Frame(np.full((8, 8), 1.0 / 64), 1.0)
    cfg = OpticalConfig(magnification=1.0, detector_pixel_pitch_um=1.0)
    det = DetectorModel(pixel_pitch_um=1.0, flux=64 * 1e6, shape=(8, 8))
    frame = detect(img, cfg, det)
    assert frame.values.max() == 65535
    assert frame.meta["saturated_pixels"] == 64


def test_detector_noiseless_counts():
    img = Frame(_blob(129, 6.0), 0.1, plane="image")
    cfg = OpticalConfig(magnification=10.0, detector_pixel_pitch_um=3.0)
    frame = detect(img, cfg, DetectorModel(pixel_pitch_um=3.0, flux=1e4, shape=(41, 41)), noiseless=True)
    assert frame.total == pytest.approx(1e4, rel=1e-6)
    assert frame.plane == "detector" and frame.object_pitch_um == pytest.approx(0.3)


def test_two_ion_scaling():
    d = two_ion_distance(CA40, OMEGA)
    assert d / two_ion_distance(CA40, 4 * OMEGA) == pytest.approx(4 ** (2 / 3))
    heavy = type(CA40)(2 * CA40.mass_u)
    assert d / two_ion_distance(heavy, OMEGA) == pytest.approx(2 ** (1 / 3))


def test_three_ion_ratio_by_grid_scan():
    # symmetric crystal (-u, 0, u): scan u in scaled units at 1e-4 resolution
    u = np.arange(0.5, 2.0, 1e-4)
    energy = u**2 + 2 / u + 1 / (2 * u)
    best = u[np.argmin(energy)]
    pos = chain_equilibrium(CA40, OMEGA, 3).positions_um / length_scale_um(CA40, OMEGA)
    assert pos[2] == pytest.approx(best, abs=1e-4)


def test_scene_single_and_pair():
    one = chain_scene(chain_equilibrium(CA40, OMEGA, 1), 0.3, 20.0)
    assert one.total == pytest.approx(1.0)
    assert np.count_nonzero(one.values) <= 4
    two = chain_scene(chain_equilibrium(CA40, OMEGA, 2), 0.3, 40.0)
    assert two.total == pytest.approx(2.0)


def test_seven_ion_scene_centroids():
    chain = chain_equilibrium(CA40, OMEGA, 7)
    pitch = 0.2
    scene = chain_scene(chain, pitch, 70.0)
    row = scene.values[scene.height // 2]
    cols = np.arange(scene.width)
    groups = np.split(np.nonzero(row)[0], np.nonzero(np.diff(np.nonzero(row)[0]) > 1)[0] + 1)
    centers = np.array([(row[g] * cols[g]).sum() / row[g].sum() for g in groups])
    expected = chain.positions_um / pitch + scene.width // 2
    np.testing.assert_allclose(centers, expected, atol=0.5)


def test_bar_target_examples():
    obj = bar_target(16.0, 3, "vertical", 1.0, 100.0)
    cols = (obj.values.sum(axis=0) > 0).astype(int)
    runs = np.diff(np.nonzero(np.diff(np.concatenate(([0], cols, [0]))))[0])
    assert runs.tolist() == [8, 8, 8, 8, 8]
    assert usaf_period_um(5, 1) == pytest.approx(31.25)


def test_convolution_identities():
    psf = Frame(_blob(21, 2.0), 1.0, plane="image")
    delta = np.zeros((31, 31))
    delta[15, 15] = 1
    img = incoherent_image(Frame(delta, 1.0), psf, "same")
    np.testing.assert_allclose(img.values[5:26, 5:26], psf.values, atol=1e-15)
    pair = np.zeros((31, 91))
    pair[15, 20] = pair[15, 70] = 1
    img = incoherent_image(Frame(pair, 1.0), psf, "same")
    assert img.values[15, 20] / img.values[15, 70] == pytest.approx(1.0, abs=1e-6)


def test_zero_exposure():
    img = Frame(_blob(65, 4.0), 0.2, plane="image")
    det = DetectorModel(exposure_s=0.0, read_noise=0.0, shape=(9, 9))
    assert detect(img, OpticalConfig(), det).values.max() == 0


def _peak_frame(seed):
    img = Frame(_blob(129, 6.0), 0.1, plane="image")
    cfg = OpticalConfig(magnification=10.0, detector_pixel_pitch_um=3.0)
    probe = DetectorModel(pixel_pitch_um=3.0, flux=1.0, shape=(41, 41))
    peak = detect(img, cfg, probe, noiseless=True).values.max()
    det = DetectorModel(pixel_pitch_um=3.0, flux=1e4 / peak, shape=(41, 41), seed=seed)
    return detect(img, cfg, det), detect(img, cfg, det, noiseless=True)


def test_peak_counts_and_reproducibility():
    a, expected = _peak_frame(11)
    b, _ = _peak_frame(11)
    np.testing.assert_array_equal(a.values, b.values)
    k = np.unravel_index(np.argmax(expected.values), expected.values.shape)
    assert abs(a.values[k] - 1e4) < 3 * np.sqrt(1e4)


def test_two_seeds_differ_at_noise_level():
    a, expected = _peak_frame(1)
    b, _ = _peak_frame(2)
    mask = expected.values > 50
    z = (a.values - b.values)[mask] / np.sqrt(2 * expected.values[mask])
    assert stats.kstest(z, "norm").pvalue > 1e-3


def test_mean_over_seeds_matches_expectation():
    frames = [_peak_frame(s)[0].values for s in range(100)]
    _, expected = _peak_frame(0)
    mean = np.mean(frames, axis=0)
    mask = expected.values > 1
    z = (mean - expected.values)[mask] / np.sqrt(expected.values[mask] / 100)
    assert abs(z.mean()) < 2 / np.sqrt(mask.sum()) * 3
    assert np.sqrt(np.mean(z**2)) == pytest.approx(1.0, abs=0.1)
