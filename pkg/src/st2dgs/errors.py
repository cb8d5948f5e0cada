"""Exception types shared across the package."""


class St2dgsError(Exception):
    """Base class for all package errors."""


class NonFiniteParameter(St2dgsError):
    """A splat or field parameter is NaN or infinite."""


class DegenerateQuaternion(St2dgsError):
    """A (raw + offset) quaternion has vanishing norm and cannot be normalized."""


class MissingForwardState(St2dgsError):
    """Backward pass requested without a retained forward pass."""


class OverflowingTile(St2dgsError):
    """Tile binning exceeded its pair budget; caller falls back to the brute path."""


class ShapeMismatch(St2dgsError):
    """Two images or maps that must share a shape do not."""


class NonFiniteLoss(St2dgsError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term
        self.value = value


class EmptyDataset(St2dgsError):
    """Dataset contains no frames."""


class EmptyPointSet(St2dgsError):
    """Chamfer evaluation requires nonempty point sets."""


class EmptySurface(St2dgsError):
    """TSDF volume contains no zero crossing to mesh."""


class EmptyMesh(St2dgsError):
    """Mesh has no triangles to sample from."""


class ManifestMissing(St2dgsError):
    """Dataset root has no transforms.json."""


class BadCameraMatrix(St2dgsError):
    """Camera rotation block is not orthonormal within tolerance."""


class MissingFile(St2dgsError):
    """A file referenced by the dataset manifest does not exist."""


class DegenerateOrdering(St2dgsError):
    """Two cameras share an azimuth; the caller falls back to input order."""


class UsageError(St2dgsError):
    """Invalid command-line usage."""
