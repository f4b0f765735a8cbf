"""Exception hierarchy shared by every module.

All errors derive from ``EoAugError`` so the CLI can map them onto exit codes:
validation/config problems exit 1, anything raised while a stage is running
exits 2.
"""


class EoAugError(Exception):
    pass


class DimensionError(EoAugError, ValueError):
    pass


class ContractError(EoAugError, ValueError):
    pass


class ConfigError(EoAugError, ValueError):
    pass


class ValidationError(EoAugError, ValueError):
    pass


class PolicyError(EoAugError, ValueError):
    pass


class TrainingError(EoAugError, RuntimeError):
    pass


class FormatError(EoAugError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class StageError(EoAugError, RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
