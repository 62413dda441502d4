"""Exception hierarchy shared across the toolkit."""


class AdashiftError(Exception):
    """Base class for all toolkit errors."""


class DataFormatError(AdashiftError):
    """A dataset or config file is malformed or violates its invariants."""


class ConfigError(AdashiftError):
    """An experiment configuration is invalid (unknown key, bad type, bad range)."""


class UncoveredClassError(AdashiftError):
    """A class with positive estimated target mass is absent from the source dataset."""

    def __init__(self, class_id: int):
        self.class_id = class_id
        super().__init__(
            f"uncovered class {class_id}: positive target probability but no source samples"
        )


class DivergenceError(AdashiftError):
    """Training produced a non-finite loss; the experiment aborts."""
