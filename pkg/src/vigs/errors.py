"""Exception types raised across the package.

Every error carries enough context to act on (index, line number, count);
callers that implement a fallback policy catch the specific class.
"""


class VigsError(Exception):
    """Base class for all package errors."""


# geometry / projection
class NonPositiveDepth(VigsError):
    """Point lies behind or on the camera plane (z <= 1e-8)."""


# gaussian map
class DegenerateCovariance(VigsError):
    """A Gaussian's scale is too small to invert its covariance."""


class InvalidGaussian(VigsError):
    """A Gaussian in an insert batch violates an invariant."""

    def __init__(self, index: int, reason: str):
        self.index = index
        self.reason = reason
        super().__init__(f"gaussian {index}: {reason}")


# rasterizer
class ContextMismatch(VigsError):
    """Backward context does not match the map it is applied to."""


# losses
class EmptyMask(VigsError):
    """No unmasked pixel remains; the loss is undefined."""


class ImageTooSmall(VigsError):
    """Image smaller than the SSIM window."""


class DegenerateVariance(VigsError):
    """Depth map constant on the mask; Pearson correlation undefined."""


# imu
class NonPositiveDt(VigsError):
    """Integration step with dt <= 0."""


class InsufficientSamples(VigsError):
    """IMU stream has a gap larger than twice the nominal period."""


class MissingImu(VigsError):
    """IMU initial guess requested without a relative transform."""


# tracker
class TrackingLost(VigsError):
    """Too few pixels covered by the map to optimize the pose."""

    def __init__(self, masked_fraction: float):
        self.masked_fraction = masked_fraction
        super().__init__(f"masked pixel fraction {masked_fraction:.4f} below floor")


# keyframing / niqe
class NoQualifiedPatches(VigsError):
    """No patch passed the sharpness filter (e.g. uniform image)."""


class CorpusTooSmall(VigsError):
    """Fewer pristine images than required to fit a NIQE model."""


# mapper
class RankDeficient(VigsError):
    """Depth estimate constant on the mask; scale/shift fit is singular."""


class NoDepth(VigsError):
    """Densification requested without a fitted depth map."""


# dataset io
class DatasetError(VigsError):
    """Base class for sequence loading failures."""


class MissingIndexFile(DatasetError):
    """Required index file (rgb.txt, ...) not found."""


class UnparsableLine(DatasetError):
    def __init__(self, path: str, line_number: int, content: str):
        self.path = path
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: cannot parse {content!r}")


class NoAssociations(DatasetError):
    """No rgb/depth pair within the association threshold."""


class NonMonotoneTimestamps(DatasetError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"timestamp at sample {index} does not increase")


class NoSensorDepth(DatasetError):
    """Sensor depth requested from a frame that has none."""


# eval
class DegenerateSpread(VigsError):
    """Point sets too degenerate (coincident/collinear) to align."""
