"""Exception hierarchy shared by the library and the command-line tool."""


class IonOpticsError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigurationError(IonOpticsError, ValueError):
    """Invalid or inconsistent configuration (units, wavelengths, file schema)."""

    exit_code = 2


class ZernikeDomainError(ConfigurationError):
    """(n, m) pair outside the valid Zernike index set, or r outside [0, 1]."""


class SamplingError(IonOpticsError, ValueError):
    """Grid or pixel sampling too coarse for the requested optics or pattern."""


class MeasurementError(IonOpticsError, ValueError):
    """A frame metric could not be measured (flat frame, peak on the border, ...)."""


class PatternError(MeasurementError):
    """Fewer bars detected in a target image than requested."""


class IllConditionedError(MeasurementError):
    """Object spectrum too weak at a requested harmonic to divide by."""


class ResolutionUnbounded(MeasurementError):
    """MTF curve never drops below the threshold within the sampled band.

    ``band_edge_um`` is the resolution implied by the highest sampled frequency,
    i.e. a lower bound on what the data can support.
    """

    def __init__(self, message, band_edge_um=None):
        super().__init__(message)
        self.band_edge_um = band_edge_um


class GeometryError(IonOpticsError, ValueError):
    """Scene element placed outside the frame extent."""


class SolverError(IonOpticsError, RuntimeError):
    """Equilibrium solver did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class FitFailure(IonOpticsError, RuntimeError):
    """Every restart of a PSF fit diverged."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
