"""Exception hierarchy shared across the toolkit.

ValidationError covers bad inputs and invariant violations (CLI exit code 2);
TrainingError covers numeric failures during optimization (exit code 3).
"""


class SlrkitError(Exception):
    pass


class ValidationError(SlrkitError):
    pass


class ManifestError(ValidationError):
    pass


class FeatureError(ValidationError):
    pass


class PcaError(ValidationError):
    def __init__(self, message, rank=None):
        super().__init__(message)
        self.rank = rank


class PairingError(ValidationError):
    pass


class TrainingError(SlrkitError):
    pass
