"""Aberration analysis for trapped-ion imaging optics.

Zernike wavefronts, diffraction PSFs, transfer functions, synthetic ion and
bar-target scenes, and Zernike retrieval from detector frames.
"""

from .diffraction import (ComplexPupil, Frame, OpticalConfig, PupilGrid, build_pupil, fwhm,
                          psf_intensity, rms_spot_radius)
from .errors import (ConfigurationError, FitFailure, GeometryError, IllConditionedError,
                     IonOpticsError, MeasurementError, PatternError, ResolutionUnbounded,
                     SamplingError, SolverError, ZernikeDomainError)
from .retrieval import (FitModel, FitOptions, FitResult, apply_correction, astigmatism_correction,
                        choose_correction, estimate_magnification, fit_psf, forward_model)
from .scene import (CA40, DetectorModel, IonChain, IonSpecies, bar_target, chain_equilibrium,
                    chain_scene, detect, incoherent_image, species, two_ion_distance)
from .transfer import (MTFCurve, coltman_ctf, ctf_measure, detector_mtf, mtf_by_deconvolution,
                       mtf_diffraction_limited, mtf_from_psf, rayleigh_resolution)
from .zernike import ZernikeExpansion, ZernikeIndex, gram_matrix, indices_up_to, zernike_eval

__version__ = "0.1.0"
