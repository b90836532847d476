"""Zernike polynomials and wave-aberration expansions on the unit disc.

Conventions
-----------
Polynomials are unnormalized (``R_n^|m|(1) = 1``) and coefficients are in
units of the wavelength. The angular factor follows the Born & Wolf style
used by the ion-imaging analysis this package implements, which is the
reverse of the ANSI/OSA assignment::

    m < 0   Z_n^m = R_n^|m|(r) cos(|m| phi)
    m = 0   Z_n^0 = R_n^0(r)
    m > 0   Z_n^m = R_n^|m|(r) sin(|m| phi)

Mapping to ANSI Z356 (where m > 0 is the cosine term)::

    here (n, m)   ANSI (n, m)   name
    (1, -1)       (1,  1)       X-tilt
    (1,  1)       (1, -1)       Y-tilt
    (2,  0)       (2,  0)       defocus
    (2, -2)       (2,  2)       astigmatism 0/90 deg
    (2,  2)       (2, -2)       astigmatism 45 deg
    (3, -1)       (3,  1)       X-coma
    (3,  1)       (3, -1)       Y-coma
    (3, -3)       (3,  3)       trefoil
    (4,  0)       (4,  0)       primary spherical

i.e. ANSI coefficients are obtained by negating ``m``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ZernikeDomainError

__all__ = [
    "ZernikeIndex",
    "ZernikeExpansion",
    "radial_poly",
    "radial_coefficients",
    "zernike_eval",
    "wavefront_eval",
    "gram_matrix",
    "indices_up_to",
    "noll_normalization",
]

# piston and both tilts; see ZernikeIndex.is_alignment
_ALIGNMENT_TERMS = {(0, 0), (1, -1), (1, 1)}


@dataclass(frozen=True, order=True)
class ZernikeIndex:
    """Radial order ``n`` and signed azimuthal index ``m``."""

    n: int
    m: int

    def __post_init__(self):
        _check_index(self.n, self.m)

    @property
    def is_alignment(self) -> bool:
        """True for piston and tilts, which carry no image-quality information."""
        return (self.n, self.m) in _ALIGNMENT_TERMS

    @property
    def is_even(self) -> bool:
        """Even under a 180 degree pupil rotation, i.e. |m| even."""
        return self.m % 2 == 0

    def __str__(self):
        return f"Z({self.n},{self.m})"


def _check_index(n, m):
    if not isinstance(n, (int, np.integer)) or not isinstance(m, (int, np.integer)):
        raise ZernikeDomainError(f"Zernike indices must be integers, got n={n!r}, m={m!r}")
    if n < 0:
        raise ZernikeDomainError(f"radial order must be >= 0, got n={n}")
    if abs(m) > n:
        raise ZernikeDomainError(f"|m| must not exceed n, got n={n}, m={m}")
    if (n - abs(m)) % 2:
        raise ZernikeDomainError(f"n - |m| must be even, got n={n}, m={m}")


def indices_up_to(n_max: int, exclude_alignment: bool = True) -> list[ZernikeIndex]:
    """All valid indices with ``n <= n_max`` in report order (n, then m ascending)."""
    out = []
    for n in range(n_max + 1):
        for m in range(-n, n + 1, 2):
            idx = ZernikeIndex(n, m)
            if exclude_alignment and idx.is_alignment:
                continue
            out.append(idx)
    return out


@lru_cache(maxsize=None)
def radial_coefficients(n: int, m_abs: int) -> tuple[tuple[int, int], ...]:
    """Exact integer (coefficient, power) pairs of R_n^|m|.

    The factorial sum runs over s = 0 .. (n - |m|)/2; integers keep the
    coefficients exact for any order.
    """
    _check_index(n, m_abs)
    if m_abs < 0:
        raise ZernikeDomainError(f"m_abs must be nonnegative, got {m_abs}")
    half_sum = (n + m_abs) // 2
    half_diff = (n - m_abs) // 2
    terms = []
    for s in range(half_diff + 1):
        coef = (-1) ** s * math.factorial(n - s) // (
            math.factorial(s) * math.factorial(half_sum - s) * math.factorial(half_diff - s)
        )
        terms.append((coef, n - 2 * s))
    return tuple(terms)


def _check_radius(r):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0) or np.any(r > 1 + 1e-12) or not np.all(np.isfinite(r)):
        raise ZernikeDomainError("radius must lie in [0, 1]")
    return r


def radial_poly(n: int, m_abs: int, r):
    """Radial Zernike polynomial R_n^|m|(r).

    Evaluated from the exact integer coefficients with Horner's scheme in
    ``r**2`` (all powers share the parity of n), which keeps the relative
    error at the level of a few ulp for the orders used here.

    Parameters
    ----------
    n, m_abs : int
        Radial order and azimuthal magnitude; ``n - m_abs`` must be even.
    r : float or array_like
        Normalized pupil radius in [0, 1].

    Returns
    -------
    float or ndarray
        Same shape as ``r``.
    """
    scalar = np.isscalar(r)
    r = _check_radius(r)
    coeffs = radial_coefficients(n, m_abs)
    # coefficients are ordered by descending power n, n-2, ..., |m|
    r2 = r * r
    acc = np.zeros_like(r)
    for coef, _ in coeffs:
        acc = acc * r2 + coef
    out = acc * r**m_abs
    return float(out) if scalar else out


def zernike_eval(idx: ZernikeIndex, r, phi):
    """Full (unnormalized) Zernike polynomial Z_n^m(r, phi)."""
    scalar = np.isscalar(r) and np.isscalar(phi)
    if not isinstance(idx, ZernikeIndex):
        idx = ZernikeIndex(*idx)
    m_abs = abs(idx.m)
    radial = radial_poly(idx.n, m_abs, np.asarray(r, dtype=float))
    phi = np.asarray(phi, dtype=float)
    if idx.m > 0:
        out = radial * np.sin(m_abs * phi)
    elif idx.m < 0:
        out = radial * np.cos(m_abs * phi)
    else:
        out = radial * np.ones_like(phi)
    return float(out) if scalar else out


@dataclass(frozen=True)
class ZernikeExpansion:
    """Sparse Zernike expansion of a wave aberration.

    ``terms`` holds ``(ZernikeIndex, coefficient)`` pairs, coefficients in
    waves at ``wavelength_nm``. Terms are kept in report order.
    """

    terms: tuple[tuple[ZernikeIndex, float], ...] = ()
    wavelength_nm: float = 397.0

    def __post_init__(self):
        cleaned = []
        for idx, c in self.terms:
            if not isinstance(idx, ZernikeIndex):
                idx = ZernikeIndex(*idx)
            c = float(c)
            if not math.isfinite(c):
                raise ConfigurationError(f"coefficient of {idx} is not finite")
            cleaned.append((idx, c))
        seen = [idx for idx, _ in cleaned]
        if len(set(seen)) != len(seen):
            raise ConfigurationError("duplicate (n, m) pairs in Zernike expansion")
        if not self.wavelength_nm > 0:
            raise ConfigurationError("wavelength_nm must be positive")
        object.__setattr__(self, "terms", tuple(sorted(cleaned, key=lambda t: t[0])))

    @classmethod
    def from_mapping(cls, coeffs: Mapping, wavelength_nm: float = 397.0) -> "ZernikeExpansion":
        """Build from ``{(n, m): c}``."""
        return cls(tuple((ZernikeIndex(*k), v) for k, v in coeffs.items()), wavelength_nm)

    @classmethod
    def from_vector(cls, basis: Sequence[ZernikeIndex], values, wavelength_nm: float = 397.0):
        return cls(tuple(zip(basis, np.asarray(values, dtype=float).tolist())), wavelength_nm)

    @property
    def indices(self) -> list[ZernikeIndex]:
        return [idx for idx, _ in self.terms]

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {(idx.n, idx.m): c for idx, c in self.terms}

    def coefficient(self, n: int, m: int) -> float:
        return self.as_dict().get((n, m), 0.0)

    def vector(self, basis: Sequence[ZernikeIndex]) -> np.ndarray:
        d = self.as_dict()
        return np.array([d.get((b.n, b.m), 0.0) for b in basis])

    def restricted(self, keep: Iterable) -> "ZernikeExpansion":
        """Sub-expansion containing only the listed (n, m) pairs."""
        keep = {(k.n, k.m) if isinstance(k, ZernikeIndex) else tuple(k) for k in keep}
        return ZernikeExpansion(
            tuple(t for t in self.terms if (t[0].n, t[0].m) in keep), self.wavelength_nm
        )

    def scaled(self, factor: float) -> "ZernikeExpansion":
        return ZernikeExpansion(tuple((i, c * factor) for i, c in self.terms), self.wavelength_nm)

    def __add__(self, other: "ZernikeExpansion") -> "ZernikeExpansion":
        if not isinstance(other, ZernikeExpansion):
            return NotImplemented
        if not math.isclose(self.wavelength_nm, other.wavelength_nm, rel_tol=1e-12):
            raise ConfigurationError(
                f"wavelength mismatch: {self.wavelength_nm} nm vs {other.wavelength_nm} nm"
            )
        total = self.as_dict()
        for (n, m), c in other.as_dict().items():
            total[(n, m)] = total.get((n, m), 0.0) + c
        return ZernikeExpansion.from_mapping(total, self.wavelength_nm)

    def twin(self) -> "ZernikeExpansion":
        """Member of the intensity-degeneracy class: even-|m| terms negated.

        ``W'(x) = -W(-x)`` yields exactly the same intensity PSF, so a single
        in-focus image cannot tell the two apart.
        """
        return ZernikeExpansion(
            tuple((i, -c if i.is_even else c) for i, c in self.terms), self.wavelength_nm
        )

    def evaluate(self, r, phi):
        return wavefront_eval(self, r, phi)

    def to_json_dict(self) -> dict:
        return {
            "wavelength_nm": self.wavelength_nm,
            "terms": [{"n": i.n, "m": i.m, "c": c} for i, c in self.terms],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ZernikeExpansion":
        if not isinstance(doc, dict):
            raise ConfigurationError("expansion document must be a JSON object")
        unknown = set(doc) - {"wavelength_nm", "terms"}
        if unknown:
            raise ConfigurationError(f"unknown keys in expansion: {sorted(unknown)}")
        if "wavelength_nm" not in doc or "terms" not in doc:
            raise ConfigurationError("expansion requires 'wavelength_nm' and 'terms'")
        terms = []
        for k, t in enumerate(doc["terms"]):
            if not isinstance(t, dict):
                raise ConfigurationError(f"term {k} must be an object")
            bad = set(t) - {"n", "m", "c"}
            if bad or len(t) != 3:
                raise ConfigurationError(f"term {k} must have exactly keys n, m, c (got {sorted(t)})")
            terms.append((ZernikeIndex(t["n"], t["m"]), t["c"]))
        return cls(tuple(terms), float(doc["wavelength_nm"]))

    @classmethod
    def from_json(cls, text: str) -> "ZernikeExpansion":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(
                f"malformed expansion JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
            ) from exc
        return cls.from_json_dict(doc)


def wavefront_eval(exp: ZernikeExpansion, r, phi):
    """W(r, phi) = sum of c_nm Z_n^m(r, phi), in waves."""
    scalar = np.isscalar(r) and np.isscalar(phi)
    r = _check_radius(r)
    phi = np.asarray(phi, dtype=float)
    out = np.zeros(np.broadcast(r, phi).shape)
    for idx, c in exp.terms:
        out = out + c * zernike_eval(idx, r, phi)
    return float(out) if scalar else out


def gram_matrix(indices: Sequence[ZernikeIndex], n_radial: int = 64, n_azimuthal: int = 64):
    """Inner products of Zernike polynomials over the unit disc.

    Gauss-Legendre nodes in r and equispaced nodes in phi; the rule is exact
    for radial degree < 2*n_radial and angular frequency < n_azimuthal.
    """
    if n_radial < 64 or n_azimuthal < 64:
        raise ValueError("gram_matrix needs at least 64 x 64 quadrature samples")
    x, w = np.polynomial.legendre.leggauss(n_radial)
    r = 0.5 * (x + 1.0)
    wr = 0.5 * w * r
    phi = 2 * np.pi * np.arange(n_azimuthal) / n_azimuthal
    wphi = 2 * np.pi / n_azimuthal
    rr, pp = np.meshgrid(r, phi, indexing="ij")
    weights = wr[:, None] * wphi
    values = [zernike_eval(idx, rr, pp) for idx in indices]
    k = len(values)
    gram = np.empty((k, k))
    for i in range(k):
        for j in range(i, k):
            gram[i, j] = gram[j, i] = np.sum(values[i] * values[j] * weights)
    return gram


def noll_normalization(idx: ZernikeIndex) -> float:
    """Factor converting an unnormalized coefficient to a Noll (RMS) one.

    ``c_noll = c / noll_normalization(idx)``, since the Noll polynomial is the
    unnormalized one scaled by sqrt((2 - delta_m0)(n + 1)).
    """
    return math.sqrt((2 - (idx.m == 0)) * (idx.n + 1))
