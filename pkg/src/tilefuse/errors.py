"""Exception types shared across the pipeline."""


class TilefuseError(Exception):
    """Base class for all package errors."""


class FormatError(TilefuseError):
    """File is not a NIfTI-1 single-file image (bad magic or header)."""


class UnsupportedDatatypeError(TilefuseError):
    """NIfTI datatype outside the supported {uint8, int16, float32} subset."""


class CorruptFileError(TilefuseError):
    """Header promises more data than the file contains."""


class WriteError(TilefuseError):
    """Output file could not be written."""


class GeometryError(TilefuseError):
    """Volumes expected on the same grid differ in dims, spacing or affine."""


class BoundsError(TilefuseError):
    """Requested region lies (partly) outside the volume."""


class InvalidInterpolationError(TilefuseError):
    """Interpolation mode not valid for the volume kind (labels need nearest)."""


class SingularTransformError(TilefuseError):
    """Affine matrix is (near-)singular and cannot be inverted."""


class DegenerateInputError(TilefuseError):
    """Input carries no usable signal (zero variance, empty, all-equal)."""


class OptimizationFailureError(TilefuseError):
    """Registration objective became non-finite."""


class EmptyMaskError(TilefuseError):
    """Mask construction produced zero voxels."""


class DegenerateFitError(TilefuseError):
    """Regression predictor has no variance or the fit is unusable."""


class InvalidLatticeError(TilefuseError):
    """Tile larger than the volume or otherwise impossible lattice."""


class CoverageGapError(TilefuseError):
    """Requested lattice cannot cover the volume (count * size < dim)."""


class LabelRangeError(TilefuseError):
    """A segmentation contains labels >= the declared label count."""


class InsufficientDataError(TilefuseError):
    """Operation needs more atlases/samples than were provided."""


class UndefinedDistanceError(TilefuseError):
    """Surface distance requested against an empty mask."""


class PluginError(TilefuseError):
    """Base class for external segmenter plugin failures."""

    def __init__(self, message: str, tile_index: int):
        super().__init__(message)
        self.tile_index = tile_index


class PluginFailureError(PluginError):
    """Plugin process exited nonzero."""

    def __init__(self, tile_index: int, exit_code: int, stderr: str):
        super().__init__(
            f"plugin failed on tile {tile_index} with exit code {exit_code}: "
            f"{stderr.strip()[:500]}",
            tile_index,
        )
        self.exit_code = exit_code
        self.stderr = stderr


class PluginTimeoutError(PluginError):
    """Plugin process exceeded its timeout."""

    def __init__(self, tile_index: int, timeout: float):
        super().__init__(
            f"plugin timed out on tile {tile_index} after {timeout:g} s", tile_index
        )
        self.timeout = timeout


class ProtocolViolationError(PluginError):
    """Plugin produced output violating the manifest contract."""


class ConfigurationError(TilefuseError):
    """Bad CLI/pipeline configuration, detected before any compute."""


class StageError(TilefuseError):
    """A pipeline stage failed; wraps the cause with stage context."""

    def __init__(self, stage: str, cause: BaseException, tile_index: int | None = None):
        where = f"stage '{stage}'"
        if tile_index is not None:
            where += f" (tile {tile_index})"
        super().__init__(f"{where}: {cause}")
        self.stage = stage
        self.tile_index = tile_index
        self.__cause__ = cause
