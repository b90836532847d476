"""Object-plane scenes, incoherent image formation, and detector simulation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from . import constants as const
from .diffraction import Frame, OpticalConfig
from .errors import ConfigurationError, GeometryError, SamplingError, SolverError

log = logging.getLogger(__name__)

__all__ = [
    "IonSpecies",
    "IonChain",
    "DetectorModel",
    "species",
    "two_ion_distance",
    "length_scale_um",
    "chain_equilibrium",
    "chain_scene",
    "usaf_period_um",
    "bar_target",
    "incoherent_image",
    "pixel_matrix",
    "project_to_detector",
    "detect",
]

FULL_WELL = 65535


@dataclass(frozen=True)
class IonSpecies:
    mass_u: float
    charge_e: int = 1
    name: str = ""

    def __post_init__(self):
        if not self.mass_u > 0:
            raise ConfigurationError("ion mass must be positive")
        if int(self.charge_e) != self.charge_e or self.charge_e < 1:
            raise ConfigurationError("ion charge must be a positive integer")

    @property
    def mass_kg(self) -> float:
        return self.mass_u * const.ATOMIC_MASS_UNIT

    @property
    def charge_c(self) -> float:
        return self.charge_e * const.ELEMENTARY_CHARGE


def species(name: str) -> IonSpecies:
    """Singly or multiply charged ion from a name like ``40Ca+`` or ``Ca40``."""
    key = name.strip()
    charge = max(key.count("+"), 1)
    key = key.replace("+", "")
    if key and key[0].isalpha():
        letters = "".join(c for c in key if c.isalpha())
        digits = "".join(c for c in key if c.isdigit())
        key = digits + letters
    if key not in const.ATOMIC_MASS_U:
        raise ConfigurationError(f"unknown ion species {name!r}; known: {sorted(const.ATOMIC_MASS_U)}")
    mass = const.ATOMIC_MASS_U[key] - charge * const.ELECTRON_MASS_U
    return IonSpecies(mass, charge, f"{key}{'+' * charge}")


CA40 = species("40Ca+")


@dataclass(frozen=True)
class IonChain:
    species: IonSpecies
    omega_z: float
    positions_um: np.ndarray
    gradient_norm: float = 0.0

    @property
    def spacings_um(self) -> np.ndarray:
        return np.diff(self.positions_um)

    def to_json_dict(self) -> dict:
        return {
            "omega_z_hz": self.omega_z / (2 * math.pi),
            "mass_u": self.species.mass_u,
            "charge_e": int(self.species.charge_e),
            "positions_um": [float(p) for p in self.positions_um],
            "spacings_um": [float(s) for s in self.spacings_um],
        }


def length_scale_um(sp: IonSpecies, omega_z: float) -> float:
    """Natural chain length (q^2 / (4 pi eps0 m omega^2))^(1/3) in um."""
    if not omega_z > 0:
        raise ConfigurationError("omega_z must be positive")
    l3 = sp.charge_c**2 / (4 * math.pi * const.VACUUM_PERMITTIVITY * sp.mass_kg * omega_z**2)
    return l3 ** (1 / 3) * 1e6


def two_ion_distance(sp: IonSpecies, omega_z: float) -> float:
    """Equilibrium separation of a balanced two-ion crystal, in um."""
    if not omega_z > 0:
        raise ConfigurationError("omega_z must be positive")
    d3 = sp.charge_c**2 / (2 * math.pi * const.VACUUM_PERMITTIVITY * sp.mass_kg * omega_z**2)
    return d3 ** (1 / 3) * 1e6


def _chain_gradient(u):
    diff = u[:, None] - u[None, :]
    np.fill_diagonal(diff, np.inf)
    return u - np.sum(np.sign(diff) / diff**2, axis=1)


def _chain_hessian(u):
    diff = np.abs(u[:, None] - u[None, :])
    np.fill_diagonal(diff, np.inf)
    h = -2.0 / diff**3
    np.fill_diagonal(h, 0.0)
    np.fill_diagonal(h, 1.0 - h.sum(axis=1))
    return h


def _chain_energy(u):
    diff = np.abs(u[:, None] - u[None, :])
    iu = np.triu_indices(len(u), 1)
    return 0.5 * np.sum(u * u) + np.sum(1.0 / diff[iu])


def chain_equilibrium(sp: IonSpecies, omega_z: float, n_ions: int, tol: float = 1e-12,
                      max_iter: int = 100) -> IonChain:
    """Axial equilibrium positions of a linear Coulomb crystal.

    Damped Newton iteration on the dimensionless potential
    ``sum u_i^2 / 2 + sum_{i<j} 1 / |u_i - u_j|`` (lengths in units of
    :func:`length_scale_um`), stopped when the gradient norm drops below ``tol``.
    """
    if not 1 <= n_ions <= 20:
        raise ConfigurationError("n_ions must lie in 1..20")
    scale = length_scale_um(sp, omega_z)
    if n_ions == 1:
        return IonChain(sp, omega_z, np.zeros(1), 0.0)
    # approximate minimum spacing 2.018 / N^0.559 sets the starting span
    u = np.linspace(-1, 1, n_ions) * 0.5 * (n_ions - 1) * 2.018 / n_ions**0.559
    g = _chain_gradient(u)
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            break
        step = np.linalg.solve(_chain_hessian(u), -g)
        e0 = _chain_energy(u)
        t = 1.0
        while t > 1e-8:
            trial = u + t * step
            if np.all(np.diff(trial) > 0) and _chain_energy(trial) <= e0 + 1e-15 * abs(e0):
                break
            t *= 0.5
        u = trial
        g = _chain_gradient(u)
    gnorm = float(np.linalg.norm(g))
    if gnorm >= tol:
        raise SolverError(f"chain solver did not converge, gradient norm {gnorm:.3e}", gnorm)
    u = 0.5 * (u - u[::-1])  # exact antisymmetry about the trap center
    return IonChain(sp, omega_z, u * scale, gnorm)


def _bilinear_deposit(values, row, col, weight=1.0):
    r0, c0 = math.floor(row), math.floor(col)
    fr, fc = row - r0, col - c0
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dc, wc in ((0, 1 - fc), (1, fc)):
            if wr * wc:
                values[r0 + dr, c0 + dc] += weight * wr * wc


def chain_scene(chain: IonChain, pitch: float, extent: float, margin: float = 5.0) -> Frame:
    """Point emitters of unit intensity along the horizontal (trap) axis."""
    n = int(round(extent / pitch))
    if n < 4:
        raise SamplingError("scene extent spans fewer than 4 pixels")
    half = (n // 2) * pitch
    reach = np.max(np.abs(chain.positions_um)) + margin
    if reach > half - pitch:
        raise GeometryError(
            f"ions reach {reach:.3f} um from the center including margin, beyond the "
            f"scene half-width {half - pitch:.3f} um"
        )
    values = np.zeros((n, n))
    c = n // 2
    for z in chain.positions_um:
        _bilinear_deposit(values, c, c + z / pitch)
    return Frame(values, pitch, plane="object")


def usaf_period_um(group: int, element: int) -> float:
    """Line-pair period of a 1951 USAF target element, in um."""
    if not 1 <= element <= 6:
        raise ConfigurationError("USAF element must lie in 1..6")
    return 1e3 / 2 ** (group + (element - 1) / 6)


def _coverage(edges_lo, edges_hi, start, stop):
    return np.clip(np.minimum(edges_hi, stop) - np.maximum(edges_lo, start), 0, None)


def bar_target(period: float, n_bars: int = 3, orientation: str = "vertical", pitch: float = 1.0,
               extent: float = 256.0) -> Frame:
    """Binary bar pattern, bar width period/2 and length 5x the width.

    Pixels record their covered area fraction. The pattern is centered on
    the pixel corner above-left of the frame's center pixel, so an even
    number of pixels per bar gives exact 0/1 columns.
    """
    if period < 4 * pitch:
        raise SamplingError(f"period {period} um is below 4 pixels of {pitch} um")
    if orientation not in ("vertical", "horizontal"):
        raise ValueError(f"orientation must be 'vertical' or 'horizontal', got {orientation!r}")
    n = int(round(extent / pitch))
    width = period / 2
    across = (2 * n_bars - 1) * width
    along = 5 * width
    if max(across, along) > (n - 2) * pitch:
        raise GeometryError("bar pattern does not fit in the frame extent")
    lo = (np.arange(n) - n // 2 - 0.5) * pitch
    hi = lo + pitch
    # pattern center at -pitch/2, i.e. on a pixel edge
    x0 = -0.5 * pitch - across / 2
    cover_x = np.zeros(n)
    for k in range(n_bars):
        s = x0 + 2 * k * width
        cover_x += _coverage(lo, hi, s, s + width)
    y0 = -0.5 * pitch - along / 2
    cover_y = _coverage(lo, hi, y0, y0 + along)
    values = np.outer(cover_y, cover_x) / pitch**2
    if orientation == "horizontal":
        values = values.T
    return Frame(values, pitch, plane="object")


def incoherent_image(obj: Frame, psf: Frame, mode: str = "full") -> Frame:
    """Intensity convolution of an object with a PSF (object-plane coordinates).

    ``mode="full"`` returns the complete linear convolution on a frame whose
    center pixel is still the optical axis, so no light is lost.
    ``mode="same"`` crops to the object's frame.
    """
    if not math.isclose(obj.object_pitch_um, psf.object_pitch_um, rel_tol=1e-9):
        raise ConfigurationError(
            f"pitch mismatch: object {obj.object_pitch_um} um vs PSF {psf.object_pitch_um} um")
    full = fftconvolve(obj.values, psf.values, mode="full")
    full = np.clip(full, 0.0, None)
    co = np.array(obj.values.shape) // 2
    cp = np.array(psf.values.shape) // 2
    if mode == "same":
        h, w = obj.values.shape
        out = full[cp[0]:cp[0] + h, cp[1]:cp[1] + w]
    elif mode == "full":
        size = 2 * (co + cp) + 1
        out = np.zeros(size)
        out[:full.shape[0], :full.shape[1]] = full
    else:
        raise ValueError("mode must be 'full' or 'same'")
    return Frame(out, obj.object_pitch_um, plane="image")


@dataclass(frozen=True)
class DetectorModel:
    """Camera description for :func:`detect`.

    ``flux`` is the expected count rate per unit of source intensity, so a
    unit-energy PSF yields ``flux * quantum_efficiency * exposure_s`` counts.
    """

    pixel_pitch_um: float = 13.0
    quantum_efficiency: float = 1.0
    exposure_s: float = 1.0
    flux: float = 1e5
    read_noise: float = 0.0
    seed: int = 0
    shape: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.pixel_pitch_um > 0:
            raise ConfigurationError("detector pixel pitch must be positive")
        if not 0 <= self.quantum_efficiency <= 1:
            raise ConfigurationError("quantum efficiency must lie in [0, 1]")
        for name in ("exposure_s", "flux", "read_noise"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")

    @property
    def gain(self) -> float:
        return self.flux * self.quantum_efficiency * self.exposure_s


def pixel_matrix(n_fine: int, fine_pitch: float, pixel: float, n_out: int, center: float,
                 integrate: bool = True, derivative: bool = False):
    """Linear map from fine samples to pixel-integrated values along one axis.

    The fine samples (origin at index ``n_fine // 2``) are treated as a
    band-limited periodic signal; output pixel ``k`` is centered at
    ``(k - center) * pixel`` from that origin and receives the integral of
    the signal over its width (or the point value times the width if
    ``integrate`` is False). With ``derivative`` the matrix differentiated
    with respect to ``center`` is returned as well.
    """
    f = np.fft.fftfreq(n_fine, fine_pitch)
    weight = np.sinc(f * pixel) if integrate else np.ones_like(f)
    x = (np.arange(n_out) - center) * pixel
    phase = np.exp(2j * np.pi * np.outer(x, f))
    kernel = phase * weight
    # sum_k kernel[., k] exp(-2 pi i f_k x_n) with x_n = (n - n_fine//2) fine_pitch
    shift = np.exp(2j * np.pi * f * (n_fine // 2) * fine_pitch)
    scale = pixel / (n_fine * fine_pitch)
    mat = np.fft.fft(kernel * shift, axis=1).real * scale
    if not derivative:
        return mat
    dkernel = kernel * (-2j * np.pi * f * pixel)
    dmat = np.fft.fft(dkernel * shift, axis=1).real * scale
    return mat, dmat


def project_to_detector(img: Frame, pixel: float, shape: Sequence[int] | None = None,
                        center=None, integrate: bool = True) -> np.ndarray:
    """Noiseless pixel-integrated projection of an object-plane image.

    ``pixel`` is the detector pitch referred to the object plane. Returns
    the fraction of the image energy landing in each pixel.
    """
    h, w = img.values.shape
    d = img.object_pitch_um
    if shape is None:
        shape = (max(int(h * d / pixel), 1), max(int(w * d / pixel), 1))
    ky, kx = shape
    cy, cx = (ky // 2, kx // 2) if center is None else center
    ay = pixel_matrix(h, d, pixel, ky, cy, integrate)
    ax = pixel_matrix(w, d, pixel, kx, cx, integrate)
    return ay @ img.values @ ax.T


def detect(img: Frame, cfg: OpticalConfig, det: DetectorModel, noiseless: bool = False) -> Frame:
    """Simulated camera frame of an object-plane image.

    Magnifies by ``cfg.magnification``, integrates over square pixels,
    scales to expected counts, then draws Poisson counts plus Gaussian read
    noise from a generator seeded with ``det.seed`` and clamps to the 16-bit
    full well. ``noiseless`` returns the expected counts instead.
    """
    pixel = det.pixel_pitch_um / cfg.magnification
    expected = project_to_detector(img, pixel, det.shape) * det.gain
    expected = np.clip(expected, 0.0, None)
    meta = {"saturated_pixels": 0}
    if noiseless:
        counts = expected
    else:
        rng = np.random.default_rng(det.seed)
        counts = rng.poisson(expected).astype(float)
        if det.read_noise > 0:
            counts += rng.normal(0.0, det.read_noise, size=counts.shape)
        counts = np.rint(counts)
        saturated = int(np.count_nonzero(counts > FULL_WELL))
        if saturated:
            log.warning("%d detector pixels saturated", saturated)
        meta["saturated_pixels"] = saturated
        counts = np.clip(counts, 0, FULL_WELL)
    return Frame(counts, det.pixel_pitch_um, plane="detector",
                 magnification=cfg.magnification, meta=meta)
