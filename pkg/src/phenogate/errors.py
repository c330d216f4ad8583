"""Exception hierarchy shared across the pipeline."""


class PhenogateError(Exception):
    """Base class for all pipeline errors."""


# --- rule language ----------------------------------------------------------

class RuleSyntaxError(PhenogateError):
    """Malformed rule source; carries 1-based line and column."""

    def __init__(self, line: int, column: int, message: str):
        self.line = line
        self.column = column
        self.message = message
        super().__init__(f"line {line}, col {column}: {message}")


class RuleSemanticError(PhenogateError):
    """Structurally valid source with an invalid meaning (undefined name, duplicate class, ...)."""


class CapacityError(PhenogateError):
    """Panel or enumeration size above the supported limit."""


# --- phenotype engine -------------------------------------------------------

class MultiAssignmentError(PhenogateError):
    """A gate word matched two or more annotation classes; the rule program is unsound."""

    def __init__(self, classes, gate_bits: int, index: int | None = None):
        self.classes = list(classes)
        self.gate_bits = gate_bits
        self.index = index
        where = "" if index is None else f" at batch index {index}"
        super().__init__(
            f"gate word {gate_bits:#x}{where} matched multiple classes: {', '.join(self.classes)}"
        )


class MissingThresholdError(PhenogateError):
    def __init__(self, marker: str):
        self.marker = marker
        super().__init__(f"no threshold for marker {marker!r}")


class MissingChannelError(PhenogateError):
    def __init__(self, marker: str):
        self.marker = marker
        super().__init__(f"no channel for marker {marker!r}")


# --- slide IO ---------------------------------------------------------------

class SlideIOError(PhenogateError):
    """File missing or unreadable; message carries the path."""


class DecodeError(PhenogateError):
    """File exists but does not decode as the declared format."""


class DimensionMismatchError(PhenogateError):
    """Image planes (or model/input shapes) disagree; message names the offender."""


class EmptyMaskError(PhenogateError):
    """Instance mask contains no nonzero label."""


# --- patches, folds, sampling ----------------------------------------------

class OutOfBoundsError(PhenogateError):
    """Requested centroid lies outside the image."""


class MissingImageError(PhenogateError):
    def __init__(self, slide_id: str):
        self.slide_id = slide_id
        super().__init__(f"no rendered image for slide {slide_id!r}")


class LabelTableMismatchError(PhenogateError):
    """Label table references a nucleus id absent from the feature table."""


class UnsatisfiableError(PhenogateError):
    """No fold plan satisfying the stratification constraints within the attempt bound."""


class EmptyClassError(PhenogateError):
    def __init__(self, class_name: str):
        self.class_name = class_name
        super().__init__(f"class {class_name!r} has no records in the requested subset")


# --- metrics ----------------------------------------------------------------

class LabelOutOfRangeError(PhenogateError):
    """True or predicted label outside [0, n_classes)."""


class EmptyMatrixError(PhenogateError):
    """Confusion matrix has zero total count."""


class InsufficientFoldsError(PhenogateError):
    """Cross-fold aggregation needs at least two folds."""


# --- synthetic data ---------------------------------------------------------

class NoWitnessError(PhenogateError):
    def __init__(self, class_name: str):
        self.class_name = class_name
        super().__init__(f"class {class_name!r} has an empty witness set")


class PlacementFailureError(PhenogateError):
    """Could not place non-overlapping nuclei at the requested density."""
