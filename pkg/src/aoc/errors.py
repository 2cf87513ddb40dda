"""Exception types shared across the package.

Each class carries a short machine-readable ``category`` that the CLI turns
into an exit code.
"""


class AOCError(Exception):
    category = "error"
    exit_code = 1


class NumericDivergence(AOCError):
    category = "numeric-divergence"
    exit_code = 4


class SchemaError(AOCError):
    category = "schema-mismatch"
    exit_code = 3


class CorpusFormatError(AOCError):
    category = "corrupt-file"
    exit_code = 5


class GeometryError(AOCError):
    """Raised when a hull decomposition violates its own invariants."""

    category = "internal-geometry"
    exit_code = 6
