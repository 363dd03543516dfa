"""Typed exceptions shared across the package."""

from __future__ import annotations


class PoseLoopError(Exception):
    """Base class for all package errors."""


class EmptyPointSet(PoseLoopError):
    """An operation that needs at least one point received none."""


class DegenerateAabb(PoseLoopError):
    """Bounding-box extents are not strictly positive."""


class MissingAsset(PoseLoopError):
    """A file referenced by a manifest or bundle does not exist."""

    def __init__(self, path, message=None):
        super().__init__(message or f"missing asset: {path}")
        self.path = str(path)


class ManifestError(PoseLoopError):
    """A scene manifest or bundle failed to parse or validate."""


class EmptyObject(PoseLoopError):
    """A segmentation mask contained no valid-depth pixels."""

    def __init__(self, object_id):
        super().__init__(f"mask '{object_id}' has no valid-depth pixels")
        self.object_id = object_id


class UnknownObjectId(PoseLoopError):
    """An object id does not exist in the scene."""


class RoleConflict(PoseLoopError):
    """Target and related object sets overlap."""


class RolesUnassigned(PoseLoopError):
    """An operation requires target/related roles that have not been assigned."""


class ParseFailure(PoseLoopError):
    """An agent response could not be parsed against its schema."""

    def __init__(self, reason, raw_text=""):
        super().__init__(reason)
        self.reason = reason
        self.raw_text = raw_text


class ProtocolViolation(PoseLoopError):
    """An agent kept violating the wire protocol after a repair reprompt."""

    def __init__(self, reason, raw_text="", memory=None):
        super().__init__(reason)
        self.raw_text = raw_text
        self.memory = memory


class BackendUnavailable(PoseLoopError):
    """All retries against a remote backend were exhausted."""


class ReplayMiss(PoseLoopError):
    """A replay transcript has no entry for the requested key."""

    def __init__(self, key):
        super().__init__(f"no transcript entry for request key {key}")
        self.key = key


class EmptySuite(PoseLoopError):
    """A task suite file contains no tasks."""
