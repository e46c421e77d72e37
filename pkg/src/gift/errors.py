"""Exception hierarchy shared by every module."""


class GiftError(Exception):
    pass


class ValidationError(GiftError, ValueError):
    pass


class IncompatibleLatentError(GiftError):
    """Latent code does not fit the generator it is used with."""


class LatentFormatError(GiftError):
    """On-disk latent directory is truncated or malformed."""


class UnsupportedCombinationError(GiftError):
    pass


class DivergenceError(GiftError):
    def __init__(self, stage: str, step: int, value: float):
        super().__init__(f"{stage}: non-finite loss {value} at step {step}")
        self.stage = stage
        self.step = step


class ConfigurationError(GiftError):
    pass


class TrainingFailure(GiftError):
    pass
