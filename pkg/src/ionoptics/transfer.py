"""Transfer-function metrics: MTF from a PSF, analytic references, bar-target CTF.

All frequencies are in cycles per mm referred to the object plane.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .diffraction import Frame, OpticalConfig
from .errors import IllConditionedError, PatternError, ResolutionUnbounded

log = logging.getLogger(__name__)

__all__ = [
    "MTFCurve",
    "mtf_from_psf",
    "mtf_diffraction_limited",
    "detector_mtf",
    "rayleigh_resolution",
    "ctf_measure",
    "coltman_ctf",
    "mtf_by_deconvolution",
    "bar_profile",
]

RAYLEIGH_MODULATION = 0.2


@dataclass(frozen=True)
class MTFCurve:
    frequencies: np.ndarray
    modulation: np.ndarray
    label: str = ""
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        m = np.asarray(self.modulation, dtype=float)
        if f.shape != m.shape or f.ndim != 1:
            raise ValueError("frequencies and modulation must be 1-D arrays of equal length")
        if np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        if not np.all(np.isfinite(m)):
            raise ValueError("modulation contains non-finite values")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "modulation", m)

    def __len__(self):
        return len(self.frequencies)

    def __mul__(self, other: "MTFCurve") -> "MTFCurve":
        if not np.array_equal(self.frequencies, other.frequencies):
            raise ValueError("curves must share a frequency axis to be composed")
        label = " x ".join(s for s in (self.label, other.label) if s)
        return MTFCurve(self.frequencies, self.modulation * other.modulation, label)

    def at(self, freqs) -> np.ndarray:
        """Linear interpolation of the modulation at ``freqs``."""
        return np.interp(freqs, self.frequencies, self.modulation)

    @property
    def max_frequency(self) -> float:
        return float(self.frequencies[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {self.label or 'mtf'}\n")
        for key in sorted(self.provenance):
            buf.write(f"# {key}: {self.provenance[key]}\n")
        buf.write("frequency_mm^-1,modulation\n")
        for f, m in zip(self.frequencies, self.modulation):
            buf.write(f"{f:.9g},{m:.9g}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MTFCurve":
        rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        if not rows or not rows[0].startswith("frequency"):
            raise ValueError("missing CSV column header")
        data = np.array([[float(x) for x in ln.split(",")] for ln in rows[1:]])
        label = text.splitlines()[0].lstrip("# ").strip() if text.startswith("#") else ""
        return cls(data[:, 0], data[:, 1], label)


def _frequency_axis(n: int, pitch_um: float) -> np.ndarray:
    return np.arange(n // 2 + 1) / (n * pitch_um) * 1e3


def mtf_from_psf(psf: Frame, axis: str = "horizontal") -> MTFCurve:
    """Axis cut of |normalized DFT of the intensity PSF|.

    The cut along ``axis`` equals the 1-D transform of the line spread
    function obtained by summing the PSF across the other axis. Frequencies
    run from 0 to 1 / (2 * object pitch).
    """
    v = psf.values
    if not np.all(np.isfinite(v)):
        raise ValueError("PSF contains non-finite values")
    total = v.sum()
    if not total > 0:
        raise ValueError("PSF has zero total intensity")
    if axis == "horizontal":
        lsf = v.sum(axis=0)
    elif axis == "vertical":
        lsf = v.sum(axis=1)
    else:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    spectrum = np.abs(np.fft.rfft(lsf)) / total
    freqs = _frequency_axis(len(lsf), psf.object_pitch_um)
    return MTFCurve(freqs, spectrum, label=f"measured {axis}",
                    provenance={"object_pitch_um": f"{psf.object_pitch_um:.9g}", "axis": axis})


def _dl_mtf(x):
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    return (2 / np.pi) * (np.arccos(x) - x * np.sqrt(1 - x * x))


def mtf_diffraction_limited(cfg: OpticalConfig, freqs) -> MTFCurve:
    """Incoherent circular-aperture MTF with cutoff 2 NA / lambda."""
    freqs = np.asarray(freqs, dtype=float)
    if np.any(freqs < 0):
        raise ValueError("frequencies must be nonnegative")
    nu_c = cfg.cutoff_per_mm
    return MTFCurve(freqs, _dl_mtf(freqs / nu_c), label="diffraction limit",
                    provenance={"NA": cfg.numerical_aperture, "wavelength_nm": cfg.wavelength_nm})


def detector_mtf(pitch_object_um: float, freqs) -> MTFCurve:
    """Square-pixel averaging transfer |sinc(nu p)| for an object-plane pitch p."""
    if not pitch_object_um > 0:
        raise ValueError("pixel pitch must be positive")
    freqs = np.asarray(freqs, dtype=float)
    return MTFCurve(freqs, np.abs(np.sinc(freqs * pitch_object_um * 1e-3)), label="detector",
                    provenance={"pixel_pitch_object_um": f"{pitch_object_um:.9g}"})


def rayleigh_resolution(curve: MTFCurve, threshold: float = RAYLEIGH_MODULATION) -> float:
    """Two-point resolution (um) at the first downward crossing of ``threshold``."""
    f, m = curve.frequencies, curve.modulation
    if m[0] < threshold:
        raise ResolutionUnbounded(f"curve starts below modulation {threshold}")
    below = np.nonzero(m < threshold)[0]
    if below.size == 0:
        edge = 1e3 / f[-1] if f[-1] > 0 else None
        raise ResolutionUnbounded(
            f"modulation stays above {threshold} up to the band edge {f[-1]:.6g} mm^-1",
            band_edge_um=edge,
        )
    k = below[0]
    f0, f1, m0, m1 = f[k - 1], f[k], m[k - 1], m[k]
    nu = f0 + (m0 - threshold) * (f1 - f0) / (m0 - m1)
    return float(1e3 / nu)


def coltman_ctf(mtf, f0: float, n_max: int = 9) -> float:
    """Square-wave response from a sine-wave MTF via the Coltman series.

    ``mtf`` is a callable of frequency; the alternating series over odd
    harmonics is truncated at ``n_max``.
    """
    total = 0.0
    for k in range(1, n_max + 1, 2):
        sign = 1.0 if (k // 2) % 2 == 0 else -1.0
        total += sign * float(mtf(k * f0)) / k
    return 4 / np.pi * total


def _runs(mask):
    """(start, stop) index pairs of True runs."""
    padded = np.concatenate(([False], mask, [False]))
    d = np.diff(padded.astype(int))
    return list(zip(np.nonzero(d == 1)[0], np.nonzero(d == -1)[0]))


def bar_profile(img: Frame, orientation: str = "vertical", band=None):
    """Mean intensity profile across the bars.

    Bars with a vertical long axis are profiled along x. The profile averages
    the middle half of the rows occupied by the bars, or the rows in ``band``.
    Returns ``(profile, band)``.
    """
    if orientation == "vertical":
        v = img.values
    elif orientation == "horizontal":
        v = img.values.T
    else:
        raise ValueError(f"orientation must be 'vertical' or 'horizontal', got {orientation!r}")
    if band is None:
        rows = v.sum(axis=1)
        lo = rows.min()
        inside = np.nonzero(rows >= lo + 0.5 * (rows.max() - lo))[0]
        if inside.size == 0 or rows.max() == lo:
            band = (0, v.shape[0])
        else:
            a, b = inside[0], inside[-1] + 1
            q = (b - a) // 4
            band = (a + q, max(b - q, a + q + 1))
    return v[band[0]:band[1]].mean(axis=0), band


def _plateau_level(samples, upper: bool) -> float:
    """Extremum of a quadratic fitted over the middle half of a plateau."""
    n = len(samples)
    q = n // 4
    window = samples[q:n - q] if n - 2 * q >= 3 else samples[max(0, n // 2 - 1):n // 2 + 2]
    if len(window) < 3:
        return float(window.mean())
    x = np.arange(len(window)) - (len(window) - 1) / 2
    coef = np.polyfit(x, window, 2)
    xs = np.linspace(x[0], x[-1], 201)
    fit = np.polyval(coef, xs)
    return float(fit.max() if upper else fit.min())


def _detect_bars(profile):
    lo, hi = profile.min(), profile.max()
    span = np.nonzero(profile >= lo + 0.25 * (hi - lo))[0]
    a, b = span[0], span[-1] + 1
    segment = profile[a:b]
    mid = 0.5 * (segment.min() + segment.max())
    bars = [(a + s, a + e) for s, e in _runs(segment > mid)]
    return bars


def ctf_measure(img: Frame, n_bars: int = 3, orientation: str = "vertical") -> float:
    """Contrast (I_max - I_min) / (I_max + I_min) of a bar-target image.

    I_max and I_min average over bars and over the gaps between them; each
    plateau level is the extremum of a quadratic fitted to its middle half,
    so isolated single-pixel extrema do not set the contrast.
    """
    profile, _ = bar_profile(img, orientation)
    if np.ptp(profile) <= 1e-12 * max(abs(profile.max()), 1e-300):
        log.warning("uniform image: contrast is undefined, reporting 0")
        return 0.0
    bars = _detect_bars(profile)
    if len(bars) < n_bars:
        raise PatternError(f"detected {len(bars)} bars, expected {n_bars}")
    if len(bars) > n_bars:
        # keep the n_bars widest runs in their original order
        keep = sorted(sorted(bars, key=lambda r: r[1] - r[0], reverse=True)[:n_bars])
        bars = keep
    i_max = np.mean([_plateau_level(profile[s:e], True) for s, e in bars])
    gaps = [(bars[k][1], bars[k + 1][0]) for k in range(len(bars) - 1)]
    i_min = np.mean([_plateau_level(profile[s:e], False) for s, e in gaps if e > s])
    return float((i_max - i_min) / (i_max + i_min))


def _dtft(profile, freq_per_px):
    x = np.arange(len(profile))
    return np.sum(profile * np.exp(-2j * np.pi * freq_per_px * x))


def mtf_by_deconvolution(obj: Frame, img: Frame, harmonics=(1, 3), orientation: str = "vertical",
                         floor: float = 1e-3):
    """MTF at odd harmonics of a bar target from |F{image}| / |F{object}|.

    The fundamental comes from the bar spacing detected in ``obj``. Returns a
    list of ``(frequency_mm^-1, modulation)``.

    Raises
    ------
    IllConditionedError
        If a harmonic lies beyond Nyquist or the object spectrum there is below
        ``floor`` times its DC value.
    """
    if not np.isclose(obj.object_pitch_um, img.object_pitch_um, rtol=1e-9):
        raise ValueError("object and image frames must share the object-plane pitch")
    p_obj, band = bar_profile(obj, orientation)
    p_img, _ = bar_profile(img, orientation, band=band)
    bars = _detect_bars(p_obj)
    if len(bars) < 2:
        raise PatternError("need at least two bars in the object to find the period")
    centers = [(s + e - 1) / 2 for s, e in bars]
    period_px = float(np.mean(np.diff(centers)))
    f0 = 1.0 / period_px
    dc = abs(_dtft(p_obj, 0.0))
    out = []
    for k in harmonics:
        if k < 1 or k % 2 == 0:
            raise ValueError(f"harmonics must be odd positive integers, got {k}")
        f = k * f0
        if f >= 0.5:
            raise IllConditionedError(
                f"harmonic {k} at {f:.3f} cycles/px lies beyond the Nyquist limit of the frame")
        g = abs(_dtft(p_obj, f))
        if g < floor * dc:
            raise IllConditionedError(f"object spectrum at harmonic {k} is below the noise floor")
        out.append((f / obj.object_pitch_um * 1e3, abs(_dtft(p_img, f)) / g))
    return out
