"""Exception types shared across the package."""


class OwsegError(Exception):
    """Base class for all package-specific errors."""


class VocabularyExhaustedError(OwsegError):
    """Requested more categories than the shape/texture vocabulary provides."""


class PlacementFailedError(OwsegError):
    """Scene generation could not place any surviving instance."""


class FormatError(OwsegError):
    """Malformed annotation file.

    Carries the offending file path plus, when known, a byte offset and a
    JSON path such as ``$.annotations[3].category_id``.
    """

    def __init__(self, message, path=None, offset=None, json_path=None):
        self.path = path
        self.offset = offset
        self.json_path = json_path
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"byte_offset={offset}")
        if json_path is not None:
            parts.append(f"json_path={json_path}")
        super().__init__(": ".join([parts[0], ", ".join(parts[1:])]) if len(parts) > 1 else message)


class RatioUnreachableError(OwsegError):
    """No prefix of removable classes reaches the requested removal ratio."""


class ShapeMismatchError(OwsegError):
    """Tensor arguments have inconsistent shapes."""


class UnknownClassError(OwsegError):
    """A class id is outside the set the operation accepts."""


class VersionMismatchError(OwsegError):
    """Checkpoint file is missing, corrupt, or from an incompatible version."""


class EmptySupportsError(OwsegError):
    """A support set with zero items was supplied."""
