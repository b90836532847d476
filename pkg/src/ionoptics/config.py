"""Run configuration: a TOML file whose keys carry their units.

Example::

    seed = 0

    [optics]
    wavelength_nm = 397.0
    numerical_aperture = 0.26
    magnification = 15.4
    detector_pixel_pitch_um = 13.0

    [grid]
    n_samples = 1024
    pupil_fill = 0.25

    [detector]
    quantum_efficiency = 1.0
    exposure_s = 1.0
    flux_counts_per_s = 1e5
    read_noise_counts = 0.0
    frame_px = [32, 32]

    [paths]
    expansion = "astig.json"

Every section is optional and unknown keys are rejected. Relative paths are
resolved against the configuration file's directory.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .diffraction import OpticalConfig, PupilGrid
from .errors import ConfigurationError
from .scene import DetectorModel

__all__ = ["RunConfig", "load_config", "parse_config"]

_OPTICS = {"wavelength_nm", "numerical_aperture", "magnification", "detector_pixel_pitch_um"}
_GRID = {"n_samples", "pupil_fill"}
_DETECTOR = {"quantum_efficiency", "exposure_s", "flux_counts_per_s", "read_noise_counts", "frame_px"}
_TOP = {"seed", "optics", "grid", "detector", "paths"}


@dataclass(frozen=True)
class RunConfig:
    optics: OpticalConfig = field(default_factory=OpticalConfig)
    grid: PupilGrid = field(default_factory=PupilGrid)
    detector: DetectorModel | None = None
    seed: int = 0
    paths: dict = field(default_factory=dict)

    def detector_model(self, seed: int | None = None) -> DetectorModel:
        """The configured detector (or a default one) at the optics' pixel pitch."""
        base = self.detector or DetectorModel()
        return DetectorModel(
            pixel_pitch_um=self.optics.detector_pixel_pitch_um,
            quantum_efficiency=base.quantum_efficiency,
            exposure_s=base.exposure_s,
            flux=base.flux,
            read_noise=base.read_noise,
            seed=self.seed if seed is None else seed,
            shape=base.shape,
        )

    def as_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "optics": {k: getattr(self.optics, k) for k in sorted(_OPTICS)},
            "grid": {"n_samples": self.grid.n_samples, "pupil_fill": self.grid.pupil_fill},
        }
        if self.detector is not None:
            d = self.detector
            out["detector"] = {
                "quantum_efficiency": d.quantum_efficiency,
                "exposure_s": d.exposure_s,
                "flux_counts_per_s": d.flux,
                "read_noise_counts": d.read_noise,
                "frame_px": list(d.shape) if d.shape else None,
            }
        return out


def _check_keys(section: dict, allowed: set, name: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{name}]: {sorted(unknown)}")


def _number(section, key, name, kind=float):
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigurationError(f"[{name}] {key} must be a number, got {v!r}")
    if kind is int and int(v) != v:
        raise ConfigurationError(f"[{name}] {key} must be an integer, got {v!r}")
    return kind(v)


def parse_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    _check_keys(doc, _TOP, "top level")
    optics_doc = doc.get("optics", {})
    _check_keys(optics_doc, _OPTICS, "optics")
    optics = OpticalConfig(**{k: _number(optics_doc, k, "optics") for k in optics_doc})

    grid_doc = doc.get("grid", {})
    _check_keys(grid_doc, _GRID, "grid")
    grid_kw = {}
    if "n_samples" in grid_doc:
        grid_kw["n_samples"] = _number(grid_doc, "n_samples", "grid", int)
    if "pupil_fill" in grid_doc:
        grid_kw["pupil_fill"] = _number(grid_doc, "pupil_fill", "grid")
    grid = PupilGrid(**grid_kw)

    detector = None
    if "detector" in doc:
        det_doc = doc["detector"]
        _check_keys(det_doc, _DETECTOR, "detector")
        kw = {}
        names = {"quantum_efficiency": "quantum_efficiency", "exposure_s": "exposure_s",
                 "flux_counts_per_s": "flux", "read_noise_counts": "read_noise"}
        for key, attr in names.items():
            if key in det_doc:
                kw[attr] = _number(det_doc, key, "detector")
        if "frame_px" in det_doc:
            shape = det_doc["frame_px"]
            if (not isinstance(shape, list) or len(shape) != 2
                    or not all(isinstance(s, int) and s > 0 for s in shape)):
                raise ConfigurationError("[detector] frame_px must be two positive integers")
            kw["shape"] = tuple(shape)
        detector = DetectorModel(pixel_pitch_um=optics.detector_pixel_pitch_um, **kw)

    seed = 0
    if "seed" in doc:
        seed = _number(doc, "seed", "top level", int)

    paths = {}
    for key, value in doc.get("paths", {}).items():
        p = Path(value)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        if not p.exists():
            raise ConfigurationError(f"[paths] {key}: file {p} does not exist")
        paths[key] = p
    return RunConfig(optics, grid, detector, seed, paths)


def load_config(path) -> RunConfig:
    """Parse a TOML run configuration; syntax errors report line and column."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return parse_config(doc, path.parent)
