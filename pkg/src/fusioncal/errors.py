"""Exception hierarchy.

Every error carries the name of the module that raised it so the CLI can
emit ``ERROR <code> <module> <message>`` lines without guessing.
"""


class FusionCalError(Exception):
    module = "fusioncal"


class ConfigError(FusionCalError):
    """Invalid configuration or usage (CLI exit code 2)."""

    module = "cli"

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


# geometry
class GeometryError(FusionCalError):
    module = "geometry"


class BehindCameraError(GeometryError):
    pass


class NonPositiveDepthError(GeometryError):
    pass


# cloudmap
class CloudMapError(FusionCalError):
    module = "cloudmap"


class NoCorrespondencesError(CloudMapError):
    pass


class LengthMismatchError(CloudMapError):
    pass


class EmptyViewError(CloudMapError):
    pass


class HolePixelError(CloudMapError):
    pass


class OutOfBoundsError(CloudMapError):
    pass


class CloudFormatError(CloudMapError):
    pass


# correspond
class CorrespondError(FusionCalError):
    module = "correspond"


class ImageTooSmallError(CorrespondError):
    pass


class ParseError(CorrespondError):
    pass


class IndexOutOfRangeError(CorrespondError):
    pass


# calib
class CalibError(FusionCalError):
    module = "calib"


class DegenerateConfigurationError(CalibError):
    pass


class AllBehindCameraError(CalibError):
    pass


class InsufficientInliersError(CalibError):
    pass


# warp
class WarpError(FusionCalError):
    module = "warp"


class PlaneBehindCameraError(WarpError):
    pass


class HomographyDegenerateError(WarpError, DegenerateConfigurationError):
    module = "warp"


# costpipe
class CostPipeError(FusionCalError):
    module = "costpipe"


class SizeMismatchError(CostPipeError):
    pass


class WindowTooShortError(CostPipeError):
    pass


class FootprintNotVisibleError(CostPipeError):
    pass


class TrajectoryGapError(CostPipeError):
    pass
