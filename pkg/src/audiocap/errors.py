"""Exception hierarchy shared by every audiocap module."""


class AudiocapError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(AudiocapError, ValueError):
    pass


class ContractViolation(AudiocapError, ValueError):
    pass


class ConfigurationError(AudiocapError, ValueError):
    pass


class TrainingDiverged(AudiocapError, RuntimeError):
    """Raised when a loss or gradient becomes NaN.

    ``last_good`` carries the most recent finite parameter snapshot (or None).
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class SequenceTooShort(AudiocapError, ValueError):
    def __init__(self, length, factor):
        super().__init__(
            f"sequence of length T={length} is too short for sub-sampling factor M={factor}"
        )
        self.length = length
        self.factor = factor


class InvalidCaption(AudiocapError, ValueError):
    pass


class OutOfVocabulary(AudiocapError, KeyError):
    def __init__(self, token):
        super().__init__(f"token {token!r} is not in the vocabulary")
        self.token = token

    def __str__(self):
        return self.args[0]


class AudioReadError(AudiocapError, OSError):
    pass


class AudioFileMissing(AudioReadError, FileNotFoundError):
    pass


class UnsupportedEncoding(AudioReadError):
    pass


class EmptyAudio(AudioReadError):
    pass


class FormatError(AudiocapError, ValueError):
    """Malformed feature, checkpoint or vocabulary file."""


class InsufficientCorpus(AudiocapError, ValueError):
    pass
