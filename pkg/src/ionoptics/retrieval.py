"""Zernike-coefficient retrieval from intensity PSF frames.

The forward model is ``amplitude * D[|FFT(pupil)|^2] + background`` where
``D`` shifts the PSF to ``(x0, y0)`` and integrates it over the detector
pixels (see :func:`ionoptics.scene.pixel_matrix`). Both operations are
linear in the intensity, so the Jacobian with respect to the Zernike
coefficients follows from one extra FFT per coefficient:

    dI/dc_j = 2 Re( conj(E) * FFT(-2 pi i Z_j P) )

Piston and tilts are excluded from the basis: tilts are exactly a
translation and are absorbed by ``(x0, y0)``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import fft as sp_fft
from scipy import stats

from .diffraction import Frame, OpticalConfig, PupilGrid, centroid, pupil_coordinates
from .errors import ConfigurationError, FitFailure
from .scene import IonSpecies, pixel_matrix, two_ion_distance
from .zernike import ZernikeExpansion, ZernikeIndex, indices_up_to, zernike_eval

log = logging.getLogger(__name__)

__all__ = [
    "FitModel",
    "FitOptions",
    "FitResult",
    "forward_model",
    "model_jacobian",
    "fit_psf",
    "estimate_magnification",
    "apply_correction",
    "astigmatism_correction",
    "choose_correction",
    "NUISANCE",
]

NUISANCE = ("x0", "y0", "amplitude", "background")


@dataclass(frozen=True)
class FitModel:
    """What is fitted and how the detector frame is formed.

    ``shape`` is the (rows, cols) of the data frame. The default basis is
    every index with n <= 5 except piston and tilts (18 terms).
    """

    cfg: OpticalConfig = field(default_factory=OpticalConfig)
    grid: PupilGrid = field(default_factory=lambda: PupilGrid(128, 0.5))
    shape: tuple[int, int] = (32, 32)
    basis: tuple[ZernikeIndex, ...] = field(default_factory=lambda: tuple(indices_up_to(5)))
    pixel_integration: bool = True
    read_noise: float = 0.0

    def __post_init__(self):
        basis = tuple(b if isinstance(b, ZernikeIndex) else ZernikeIndex(*b) for b in self.basis)
        if len(set(basis)) != len(basis):
            raise ConfigurationError("duplicate terms in fit basis")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @classmethod
    def of_order(cls, order: int, **kw) -> "FitModel":
        return cls(basis=tuple(indices_up_to(order)), **kw)

    @property
    def n_params(self) -> int:
        return len(self.basis) + len(NUISANCE)

    @property
    def pixel_object_um(self) -> float:
        return self.cfg.object_pixel_um

    @property
    def twin_ambiguous(self) -> bool:
        """True if the basis holds any even-|m| term (their sign is unobservable)."""
        return any(b.is_even for b in self.basis)

    def split(self, params):
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        k = len(self.basis)
        return params[:k], params[k:]

    def pack(self, coefficients, x0, y0, amplitude, background):
        return np.concatenate([np.asarray(coefficients, dtype=float),
                               [x0, y0, amplitude, background]])

    def expansion(self, params) -> ZernikeExpansion:
        coeffs, _ = self.split(params)
        return ZernikeExpansion.from_vector(self.basis, coeffs, self.cfg.wavelength_nm)


class _Engine:
    """Precomputed pupil basis and FFT layout for one FitModel."""

    def __init__(self, model: FitModel):
        self.model = model
        g = model.grid
        r, phi, mask = pupil_coordinates(g)
        # FFT-origin layout: the optical axis moves to index 0
        self.mask = np.fft.ifftshift(mask)
        rr = np.fft.ifftshift(r)[self.mask]
        pp = np.fft.ifftshift(phi)[self.mask]
        self.zmaps = np.array([zernike_eval(b, rr, pp) for b in model.basis]).reshape(
            len(model.basis), -1)
        self.n = g.n_samples
        self.norm = float(self.n**2 * self.mask.sum())
        self.pitch = g.object_pitch_um(model.cfg)

    def intensity(self, coeffs, with_grad=False):
        """Unit-energy PSF samples (and their coefficient gradients) in FFT layout."""
        n = self.n
        phase = -2 * np.pi * (coeffs @ self.zmaps) if len(coeffs) else 0.0
        field_ = np.zeros((n, n), dtype=complex)
        field_[self.mask] = np.exp(1j * phase)
        amp = sp_fft.fft2(field_)
        intensity = (amp.real**2 + amp.imag**2) / self.norm
        if not with_grad:
            return intensity, None
        grads = np.empty((len(coeffs), n, n))
        conj_amp = np.conj(amp) * (2 / self.norm)
        masked = (-2j * np.pi) * field_[self.mask]
        d = np.zeros((n, n), dtype=complex)
        for j, z in enumerate(self.zmaps):
            d[self.mask] = z * masked
            grads[j] = (conj_amp * sp_fft.fft2(d)).real
        return intensity, grads

    def matrices(self, x0, y0, derivative=False):
        """Pixel matrices acting on FFT-layout samples (origin at index 0)."""
        m = self.model
        rows, cols = m.shape
        p = m.pixel_object_um
        ay = pixel_matrix(self.n, self.pitch, p, rows, y0, m.pixel_integration, derivative)
        ax = pixel_matrix(self.n, self.pitch, p, cols, x0, m.pixel_integration, derivative)
        if derivative:
            return tuple(tuple(np.fft.fftshift(a, axes=1) for a in pair) for pair in (ay, ax))
        return np.fft.fftshift(ay, axes=1), np.fft.fftshift(ax, axes=1)

    def evaluate(self, params, with_jac=False):
        coeffs, (x0, y0, amplitude, background) = self.model.split(params)
        intensity, grads = self.intensity(coeffs, with_jac)
        if not with_jac:
            ay, ax = self.matrices(x0, y0)
            unit = ay @ intensity @ ax.T
            return amplitude * unit + background, None
        (ay, day), (ax, dax) = self.matrices(x0, y0, derivative=True)
        left = ay @ intensity
        unit = left @ ax.T
        model = amplitude * unit + background
        jac = np.empty((self.model.n_params,) + unit.shape)
        k = len(coeffs)
        for j in range(k):
            jac[j] = amplitude * (ay @ grads[j] @ ax.T)
        jac[k] = amplitude * (left @ dax.T)
        jac[k + 1] = amplitude * (day @ intensity @ ax.T)
        jac[k + 2] = unit
        jac[k + 3] = 1.0
        return model, jac


def forward_model(model: FitModel, params) -> Frame:
    """Expected detector counts for a parameter vector.

    ``params`` is the coefficient vector (ordered as ``model.basis``)
    followed by x0, y0 (PSF center in data-frame pixel coordinates, column
    and row), amplitude (total counts) and background (counts per pixel).
    """
    values, _ = _Engine(model).evaluate(params)
    return Frame(np.clip(values, 0.0, None), model.cfg.detector_pixel_pitch_um, plane="detector",
                 magnification=model.cfg.magnification)


def model_jacobian(model: FitModel, params) -> np.ndarray:
    """Analytic derivative of the expected counts, shape (n_params, rows, cols)."""
    _, jac = _Engine(model).evaluate(params, with_jac=True)
    return jac


@dataclass(frozen=True)
class FitOptions:
    restarts: int = 16
    max_iter: int = 200
    tol: float = 1e-10
    seed: int = 0
    prior_range: float = 0.5
    initial: tuple = ()


@dataclass
class FitResult:
    coefficients: ZernikeExpansion
    nuisance: dict
    chi_nu: float
    chi2: float
    iterations: int
    converged: bool
    best_restart: int
    uncertainties: dict = field(default_factory=dict)
    twin_ambiguous: bool = False
    low_signal: bool = False
    delta_chi2_null: float = 0.0
    restarts: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    params: np.ndarray | None = None

    def to_json_dict(self) -> dict:
        return {
            "coefficients": self.coefficients.to_json_dict(),
            "nuisance": self.nuisance,
            "chi_nu": self.chi_nu,
            "chi2": self.chi2,
            "iterations": self.iterations,
            "converged": self.converged,
            "best_restart": self.best_restart,
            "twin_ambiguous": self.twin_ambiguous,
            "low_signal": self.low_signal,
            "delta_chi2_null": self.delta_chi2_null,
            "uncertainties": self.uncertainties,
            "restarts": self.restarts,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def _frame_hash(values: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(values.shape).encode())
    h.update(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return h.hexdigest()


def _initial_nuisance(data: np.ndarray):
    border = np.concatenate([data[0], data[-1], data[1:-1, 0], data[1:-1, -1]])
    background = float(np.median(border))
    signal = np.clip(data - background, 0.0, None)
    if not signal.sum() > 0:
        signal = data
    cy, cx = centroid(signal)
    amplitude = float(max((data - background).sum(), data.sum() * 0.5, 1e-12))
    return cx, cy, amplitude, background


def _levenberg_marquardt(engine: _Engine, data, sigma, start, max_iter, tol):
    """Marquardt-scaled damped Gauss-Newton on weighted residuals."""
    params = start.copy()
    model, jac = engine.evaluate(params, with_jac=True)
    resid = ((model - data) / sigma).ravel()
    chi2 = float(resid @ resid)
    lam = 1e-3
    converged = False
    it = 0
    floor = 1e-24 * data.size
    while it < max_iter:
        it += 1
        j = (jac / sigma).reshape(len(params), -1)
        a = j @ j.T
        g = j @ resid
        diag = np.maximum(np.diag(a), 1e-30)
        improved = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(a + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            trial = params + step
            t_model, _ = engine.evaluate(trial)
            t_resid = ((t_model - data) / sigma).ravel()
            t_chi2 = float(t_resid @ t_resid)
            if np.isfinite(t_chi2) and t_chi2 < chi2:
                improved = True
                break
            lam *= 4
        if not improved:
            converged = True
            break
        decrease = (chi2 - t_chi2) / chi2
        params = trial
        model, jac = engine.evaluate(params, with_jac=True)
        resid = ((model - data) / sigma).ravel()
        chi2 = float(resid @ resid)
        lam = max(lam / 5, 1e-12)
        if decrease < tol or chi2 < floor:
            converged = True
            break
    j = (jac / sigma).reshape(len(params), -1)
    return params, chi2, it, converged, j @ j.T


def fit_psf(data: Frame, model: FitModel, options: FitOptions | None = None) -> FitResult:
    """Least-squares Zernike fit of a detector frame, best of several restarts.

    Restart 0 starts from zero aberration; the others draw every coefficient
    uniformly from +-``prior_range`` waves. Extra starting points (full
    parameter vectors or expansions, e.g. a lower-order fit) may be passed
    in ``options.initial`` and run after the random restarts. Residuals are
    weighted by ``sigma^2 = max(data, 1) + read_noise^2``; ties between
    restarts go to the lower restart index.
    """
    options = options or FitOptions()
    values = data.values
    if values.shape != model.shape:
        raise ConfigurationError(f"data shape {values.shape} does not match model shape {model.shape}")
    if not values.sum() > 0:
        raise ConfigurationError("data frame has no positive counts")
    dof = values.size - model.n_params
    if values.size < 10 * model.n_params:
        raise ConfigurationError(
            f"{values.size} pixels is fewer than 10x the {model.n_params} free parameters")
    if not math.isclose(data.object_pitch_um, model.pixel_object_um, rel_tol=1e-6):
        log.warning("data pitch %.6g um (object plane) differs from model pixel %.6g um",
                    data.object_pitch_um, model.pixel_object_um)
    sigma = np.sqrt(np.maximum(values, 1.0) + model.read_noise**2)
    engine = _Engine(model)
    k = len(model.basis)
    nuis = _initial_nuisance(values)
    rng = np.random.default_rng(options.seed)
    starts = [model.pack(np.zeros(k), *nuis)]
    for _ in range(max(options.restarts, 1) - 1):
        starts.append(model.pack(rng.uniform(-options.prior_range, options.prior_range, k), *nuis))
    for init in options.initial:
        if isinstance(init, ZernikeExpansion):
            init = model.pack(init.vector(model.basis), *nuis)
        elif isinstance(init, FitResult):
            n = init.nuisance
            init = model.pack(init.coefficients.vector(model.basis),
                              n["x0"], n["y0"], n["amplitude"], n["background"])
        starts.append(np.asarray(init, dtype=float))

    best = None
    diagnostics = []
    for idx, start in enumerate(starts):
        try:
            params, chi2, iters, conv, curvature = _levenberg_marquardt(
                engine, values, sigma, start, options.max_iter, options.tol)
        except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
            diagnostics.append({"restart": idx, "status": f"diverged: {exc}"})
            continue
        ok = np.all(np.isfinite(params)) and np.isfinite(chi2)
        diagnostics.append({"restart": idx, "chi2": chi2 if ok else None, "iterations": iters,
                            "converged": bool(conv), "status": "ok" if ok else "diverged"})
        if ok and (best is None or chi2 < best[1]):
            best = (params, chi2, iters, conv, curvature, idx)
    if best is None:
        raise FitFailure("all restarts diverged", diagnostics)

    params, chi2, iters, conv, curvature, idx = best
    try:
        cov = np.linalg.inv(curvature)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(curvature)
    errs = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    coeffs, nuis_vals = model.split(params)
    names = [f"Z({b.n},{b.m})" for b in model.basis] + list(NUISANCE)
    # likelihood ratio against a flat background: on pure noise it follows
    # chi2 with n_params - 1 degrees of freedom
    w = 1.0 / sigma**2
    flat = float((values * w).sum() / w.sum())
    delta = float((((values - flat) / sigma) ** 2).sum() - chi2)
    x0, y0, amplitude, _ = nuis_vals
    rows, cols = values.shape
    low_signal = bool(delta < stats.chi2.ppf(0.999, model.n_params - 1) or amplitude <= 0
                      or not (0 <= x0 <= cols - 1 and 0 <= y0 <= rows - 1))
    if low_signal:
        log.warning("fit is compatible with no point source (delta chi2 %.3g)", delta)
    return FitResult(
        coefficients=model.expansion(params),
        nuisance={n: float(v) for n, v in zip(NUISANCE, nuis_vals)},
        chi_nu=chi2 / dof,
        chi2=chi2,
        iterations=iters,
        converged=bool(conv),
        best_restart=idx,
        uncertainties={n: float(e) for n, e in zip(names, errs)},
        twin_ambiguous=model.twin_ambiguous,
        low_signal=low_signal,
        delta_chi2_null=delta,
        restarts=diagnostics,
        provenance={
            "frame_sha256": _frame_hash(values),
            "wavelength_nm": model.cfg.wavelength_nm,
            "numerical_aperture": model.cfg.numerical_aperture,
            "magnification": model.cfg.magnification,
            "detector_pixel_pitch_um": model.cfg.detector_pixel_pitch_um,
            "n_samples": model.grid.n_samples,
            "pupil_fill": model.grid.pupil_fill,
            "pixel_integration": model.pixel_integration,
            "read_noise": model.read_noise,
            "basis_order": max((b.n for b in model.basis), default=0),
        },
        params=params,
    )


def estimate_magnification(pixel_distance: float, pixel_pitch_um: float, sp: IonSpecies,
                           omega_z: float) -> float:
    """Magnification from the image separation of a two-ion crystal."""
    if not pixel_distance > 2:
        raise ConfigurationError("ion separation must exceed 2 pixels")
    return pixel_distance * pixel_pitch_um / two_ion_distance(sp, omega_z)


def apply_correction(exp: ZernikeExpansion, delta: ZernikeExpansion) -> ZernikeExpansion:
    """Termwise sum of an aberration and a corrector's contribution."""
    return exp + delta


def astigmatism_correction(fitted: ZernikeExpansion, refocus: bool = True) -> ZernikeExpansion:
    """Corrector cancelling the fitted (2, +-2) astigmatism.

    With ``refocus`` the fitted defocus is cancelled as well, modelling the
    shift of the tangential focus onto the sagittal one.
    """
    keep = [(2, -2), (2, 2)] + ([(2, 0)] if refocus else [])
    return fitted.restricted(keep).scaled(-1.0)


def choose_correction(system: ZernikeExpansion, candidates: Sequence[ZernikeExpansion],
                      cfg: OpticalConfig, grid: PupilGrid):
    """Pick the corrector leaving the smallest RMS spot radius on ``system``.

    Models trying each orientation of the corrective optic on the real
    system, which resolves the sign ambiguity of even-|m| fitted terms.
    Returns ``(index, spot_radii)``.
    """
    from .diffraction import build_pupil, psf_intensity, rms_spot_radius

    radii = []
    for cand in candidates:
        corrected = apply_correction(system, cand)
        radii.append(rms_spot_radius(psf_intensity(build_pupil(cfg, grid, corrected), cfg, grid)))
    return int(np.argmin(radii)), radii
