"""Error types. Each carries the CLI exit code it maps to."""


class ToothMatchError(Exception):
    exit_code = 1


class MeshFormatError(ToothMatchError, ValueError):
    """Malformed mesh or sidecar file, or a sidecar that disagrees with its mesh."""

    exit_code = 2


class SchemaError(ToothMatchError, ValueError):
    exit_code = 2


class DegenerateInputError(ToothMatchError, ValueError):
    """Input is well-formed but geometrically or combinatorially degenerate."""

    exit_code = 3


class ShapeError(ToothMatchError, ValueError):
    exit_code = 2
