"""Command-line interface: ``ionoptics {psf,mtf,target,chain,fit,correct}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .diffraction import Frame, PupilGrid, build_pupil, fwhm, psf_intensity, rms_spot_radius
from .errors import (ConfigurationError, IllConditionedError, IonOpticsError, PatternError,
                     ResolutionUnbounded, SamplingError)
from .io import dump_json, read_frame, write_frame
from .retrieval import (FitModel, FitOptions, apply_correction, astigmatism_correction,
                        choose_correction, fit_psf)
from .scene import (bar_target, chain_equilibrium, chain_scene, detect, incoherent_image, species,
                    usaf_period_um)
from .transfer import (RAYLEIGH_MODULATION, MTFCurve, ctf_measure, detector_mtf, mtf_by_deconvolution,
                       mtf_diffraction_limited, mtf_from_psf, rayleigh_resolution)
from .zernike import ZernikeExpansion, indices_up_to

log = logging.getLogger("ionoptics")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _config(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _read_expansion(path, cfg: RunConfig) -> ZernikeExpansion:
    if path is None:
        path = cfg.paths.get("expansion")
    if path is None:
        return ZernikeExpansion((), cfg.optics.wavelength_nm)
    text = Path(path).read_text()
    try:
        return ZernikeExpansion.from_json(text)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _simulate_psf(cfg: RunConfig, exp: ZernikeExpansion) -> Frame:
    return psf_intensity(build_pupil(cfg.optics, cfg.grid, exp), cfg.optics, cfg.grid)


def _psf_summary(psf: Frame) -> dict:
    return {
        "fwhm_horizontal_um": fwhm(psf, "horizontal"),
        "fwhm_vertical_um": fwhm(psf, "vertical"),
        "rms_spot_radius_um": rms_spot_radius(psf),
        "pixel_pitch_um": psf.pixel_pitch_um,
    }


def _resolution_entry(curve: MTFCurve, threshold: float) -> dict:
    try:
        return {"resolution_um": rayleigh_resolution(curve, threshold), "crossed": True}
    except ResolutionUnbounded as exc:
        return {"resolution_um": None, "crossed": False, "band_edge_um": exc.band_edge_um}


def _print_resolution(axis, entry, threshold):
    if entry["crossed"]:
        print(f"resolution {axis}: {entry['resolution_um']:.4f} um (modulation {threshold})")
    else:
        edge = entry.get("band_edge_um")
        bound = f", resolution below {edge:.4f} um" if edge else ""
        print(f"resolution {axis}: no crossing of modulation {threshold} in the sampled band{bound}")


def cmd_psf(args) -> int:
    cfg = _config(args)
    exp = _read_expansion(args.expansion, cfg)
    psf = _simulate_psf(cfg, exp)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_frame(psf, out)
    summary = _psf_summary(psf)
    summary["expansion"] = exp.to_json_dict()
    if args.detector_out:
        det = detect(psf, cfg.optics, cfg.detector_model(), noiseless=args.noiseless)
        write_frame(det, args.detector_out)
        summary["detector_total_counts"] = det.total
    summary_path = Path(args.summary) if args.summary else out.with_name(out.stem + "_summary.json")
    _write_text(summary_path, dump_json(summary))
    print(dump_json(summary), end="")
    return EXIT_OK


def cmd_mtf(args) -> int:
    cfg = _config(args)
    psf = read_frame(args.psf)
    out = Path(args.out)
    axes = ("horizontal", "vertical") if args.axis == "both" else (args.axis,)
    report = {"threshold": args.threshold, "axes": {}}
    freqs = None
    for axis in axes:
        curve = mtf_from_psf(psf, axis)
        path = out if len(axes) == 1 else out.with_name(f"{out.stem}_{axis}{out.suffix}")
        _write_text(path, curve.to_csv())
        entry = _resolution_entry(curve, args.threshold)
        entry["max_frequency_mm^-1"] = curve.max_frequency
        report["axes"][axis] = entry
        _print_resolution(axis, entry, args.threshold)
        freqs = curve.frequencies
    if args.diffraction_reference or args.detector:
        ref = mtf_diffraction_limited(cfg.optics, freqs)
        if args.diffraction_reference:
            _write_text(out.with_name(f"{out.stem}_diffraction{out.suffix}"), ref.to_csv())
            report["diffraction_limit"] = _resolution_entry(ref, args.threshold)
        if args.detector:
            composed = ref * detector_mtf(cfg.optics.object_pixel_um, freqs)
            _write_text(out.with_name(f"{out.stem}_detector{out.suffix}"), composed.to_csv())
            report["diffraction_with_detector"] = _resolution_entry(composed, args.threshold)
    _write_text(out.with_name(f"{out.stem}_report.json"), dump_json(report))
    return EXIT_OK


def cmd_target(args) -> int:
    cfg = _config(args)
    if args.period_um is not None:
        period = args.period_um
    elif args.group is not None and args.element is not None:
        period = usaf_period_um(args.group, args.element)
    else:
        raise ConfigurationError("give either --period-um or both --group and --element")
    pixel_obj = cfg.optics.object_pixel_um
    if period < 2 * pixel_obj:
        raise SamplingError(
            f"period {period:.4g} um is below the detector Nyquist period {2 * pixel_obj:.4g} um")
    pitch = args.pitch_um or cfg.grid.object_pitch_um(cfg.optics)
    across = (2 * args.n_bars - 1) * period / 2
    extent = args.extent_um or 2.5 * max(across, 2.5 * period)
    obj = bar_target(period, args.n_bars, args.orientation, pitch, extent)
    if args.identity:
        delta = np.zeros((3, 3))
        delta[1, 1] = 1.0
        psf = Frame(delta, pitch, plane="image")
    else:
        exp = _read_expansion(args.expansion, cfg)
        psf = _simulate_psf(cfg, exp)
        if not math.isclose(psf.pixel_pitch_um, pitch, rel_tol=1e-9):
            raise ConfigurationError("--pitch-um must equal the PSF sample pitch unless --identity")
    img = incoherent_image(obj, psf, mode="same")
    # the configured flux is the whole scene's count rate
    det = detect(img.with_values(img.values / img.total), cfg.optics, cfg.detector_model())
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_frame(obj, out / "object.pgm")
    write_frame(img, out / "image.pgm")
    write_frame(det, out / "detector.pgm")
    report = {
        "period_um": period,
        "frequency_mm^-1": 1e3 / period,
        "n_bars": args.n_bars,
        "orientation": args.orientation,
        "ctf_image": ctf_measure(img, args.n_bars, args.orientation),
    }
    try:
        report["ctf_detector"] = ctf_measure(det, args.n_bars, args.orientation)
    except PatternError as exc:
        report["ctf_detector"] = None
        report["ctf_detector_error"] = str(exc)
    mtf = {}
    for k in args.harmonics:
        try:
            ((f, m),) = mtf_by_deconvolution(obj, img, (k,), args.orientation)
            mtf[str(k)] = {"frequency_mm^-1": f, "modulation": m}
        except IllConditionedError as exc:
            mtf[str(k)] = {"error": str(exc)}
    report["mtf_by_deconvolution"] = mtf
    if not args.identity:
        ref = mtf_diffraction_limited(cfg.optics, [1e3 / period])
        report["diffraction_limit_mtf"] = float(ref.modulation[0])
    _write_text(out / "report.json", dump_json(report))
    print(dump_json(report), end="")
    return EXIT_OK


def cmd_chain(args) -> int:
    sp = species(args.species)
    omega = 2 * math.pi * args.omega_z_khz * 1e3
    if args.frame and Path(args.frame).with_suffix(".json").resolve() == Path(args.out).resolve():
        raise ConfigurationError("--frame sidecar would overwrite --out; choose another name")
    chain = chain_equilibrium(sp, omega, args.n)
    doc = chain.to_json_dict()
    _write_text(args.out, dump_json(doc))
    if args.frame:
        cfg = _config(args)
        exp = _read_expansion(args.expansion, cfg)
        psf = _simulate_psf(cfg, exp)
        reach = float(np.max(np.abs(chain.positions_um)))
        extent = 2 * (reach + 5.0) + 20.0
        scene = chain_scene(chain, psf.pixel_pitch_um, extent)
        img = incoherent_image(scene, psf, mode="same")
        det = detect(img.with_values(img.values / img.total), cfg.optics, cfg.detector_model())
        write_frame(det, args.frame)
    print(dump_json(doc), end="")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args)
    data = read_frame(args.data)
    if data.plane != "detector":
        raise ConfigurationError("fit expects a detector-plane frame")
    read_noise = cfg.detector.read_noise if cfg.detector else 0.0
    grid = PupilGrid(args.grid_samples, args.pupil_fill)
    model = FitModel(cfg=cfg.optics, grid=grid, shape=data.values.shape,
                     basis=tuple(indices_up_to(args.order)),
                     pixel_integration=not args.no_pixel_integration, read_noise=read_noise)
    initial = ()
    if args.warm_start:
        doc = json.loads(Path(args.warm_start).read_text())
        prev = ZernikeExpansion.from_json_dict(doc["coefficients"])
        n = doc["nuisance"]
        initial = (model.pack(prev.vector(model.basis), n["x0"], n["y0"], n["amplitude"],
                              n["background"]),)
    seed = cfg.seed if args.seed is None else args.seed
    options = FitOptions(restarts=args.restarts, max_iter=args.max_iter, tol=args.tol, seed=seed,
                         initial=initial)
    result = fit_psf(data, model, options)
    result.provenance["data_file"] = Path(args.data).name
    doc = result.to_json_dict()
    _write_text(args.out, dump_json(doc))
    print(f"chi_nu = {result.chi_nu:.6g} (best restart {result.best_restart}, "
          f"converged {result.converged})")
    if result.low_signal:
        print("warning: fitted amplitude is compatible with no signal")
    return EXIT_OK


def cmd_correct(args) -> int:
    cfg = _config(args)
    system = _read_expansion(args.expansion, cfg)
    if args.delta:
        delta = _read_expansion(args.delta, cfg)
        choice = None
    elif args.from_fit:
        doc = json.loads(Path(args.from_fit).read_text())
        fitted = ZernikeExpansion.from_json_dict(doc["coefficients"])
        candidates = [astigmatism_correction(fitted), astigmatism_correction(fitted.twin())]
        choice, radii = choose_correction(system, candidates, cfg.optics, cfg.grid)
        delta = candidates[choice]
    else:
        raise ConfigurationError("give --delta or --from-fit")
    corrected = apply_correction(system, delta)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "delta.json", delta.to_json() + "\n")
    _write_text(out / "corrected.json", corrected.to_json() + "\n")
    report = {"delta": delta.to_json_dict(), "corrected": corrected.to_json_dict()}
    if choice is not None:
        report["twin_choice"] = choice
    for label, exp in (("before", system), ("after", corrected)):
        psf = _simulate_psf(cfg, exp)
        write_frame(psf, out / f"psf_{label}.pgm")
        entry = _psf_summary(psf)
        for axis in ("horizontal", "vertical"):
            curve = mtf_from_psf(psf, axis)
            _write_text(out / f"mtf_{label}_{axis}.csv", curve.to_csv())
            entry[f"resolution_{axis}"] = _resolution_entry(curve, RAYLEIGH_MODULATION)
            _print_resolution(f"{label} {axis}", entry[f"resolution_{axis}"], RAYLEIGH_MODULATION)
        report[label] = entry
    _write_text(out / "report.json", dump_json(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ionoptics", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="TOML run configuration")
        return p

    p = common(sub.add_parser("psf", help="simulate an intensity PSF"))
    p.add_argument("--expansion", help="Zernike expansion JSON")
    p.add_argument("--out", required=True, help="output frame (.pgm or .npy)")
    p.add_argument("--summary", help="summary JSON path")
    p.add_argument("--detector-out", help="also write the detector frame here")
    p.add_argument("--noiseless", action="store_true", help="detector frame without noise")
    p.set_defaults(func=cmd_psf)

    p = common(sub.add_parser("mtf", help="MTF and Rayleigh resolution of a PSF frame"))
    p.add_argument("--psf", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--axis", choices=("horizontal", "vertical", "both"), default="horizontal")
    p.add_argument("--detector", action="store_true", help="diffraction x detector reference")
    p.add_argument("--diffraction-reference", action="store_true")
    p.add_argument("--threshold", type=float, default=RAYLEIGH_MODULATION)
    p.set_defaults(func=cmd_mtf)

    p = common(sub.add_parser("target", help="bar-target CTF and MTF"))
    p.add_argument("--group", type=int)
    p.add_argument("--element", type=int)
    p.add_argument("--period-um", type=float)
    p.add_argument("--n-bars", type=int, default=3)
    p.add_argument("--orientation", choices=("vertical", "horizontal"), default="vertical")
    p.add_argument("--pitch-um", type=float)
    p.add_argument("--extent-um", type=float)
    p.add_argument("--expansion")
    p.add_argument("--identity", action="store_true", help="perfect optics (delta PSF)")
    p.add_argument("--harmonics", type=int, nargs="+", default=[1, 3])
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_target)

    p = common(sub.add_parser("chain", help="ion-chain equilibrium and synthetic frame"))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--omega-z-khz", type=float, required=True, help="axial frequency / 2 pi")
    p.add_argument("--species", default="40Ca+")
    p.add_argument("--out", required=True)
    p.add_argument("--frame", help="write a detector frame of the chain")
    p.add_argument("--expansion")
    p.set_defaults(func=cmd_chain)

    p = common(sub.add_parser("fit", help="fit Zernike coefficients to a detector frame"))
    p.add_argument("--data", required=True)
    p.add_argument("--order", type=int, default=5)
    p.add_argument("--restarts", type=int, default=16)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--seed", type=int)
    p.add_argument("--warm-start", help="previous fit JSON used as an extra starting point")
    p.add_argument("--no-pixel-integration", action="store_true")
    p.add_argument("--grid-samples", type=int, default=128, help="pupil grid of the forward model")
    p.add_argument("--pupil-fill", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = common(sub.add_parser("correct", help="apply a corrector and re-run psf + mtf"))
    p.add_argument("--expansion", required=True, help="system aberration")
    p.add_argument("--delta", help="corrector expansion")
    p.add_argument("--from-fit", help="derive an astigmatism corrector from a fit JSON")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_correct)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IonOpticsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, KeyError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
